//! Acceptance suite. Each criterion runs under its own time budget and
//! prints one line; the process exits nonzero if any criterion fails.
//!
//! Positional arguments filter criteria by substring:
//! `cargo test --test acceptance -- learning`.

mod augment;
mod learning;
mod losses;
mod metrics;
mod permutation;
mod service;
mod splits;
mod structure;

#[path = "../common/mod.rs"]
#[allow(dead_code)]
mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> String,
}

const fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { name: "loss oracles", budget: secs(60), run: losses::run },
        Criterion { name: "metric oracles", budget: secs(60), run: metrics::run },
        Criterion { name: "augmentation invariants", budget: secs(120), run: augment::run },
        Criterion { name: "structural checks", budget: None, run: structure::run },
        Criterion { name: "learning sanity", budget: secs(15 * 60), run: learning::run },
        Criterion { name: "permutation calibration", budget: secs(10 * 60), run: permutation::run },
        Criterion { name: "split integrity", budget: None, run: splits::run },
        Criterion { name: "service contract", budget: None, run: service::run },
    ]
}

fn main() {
    let _ = env_logger::builder().is_test(false).try_init();
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<Criterion> = criteria()
        .into_iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
        .collect();
    let quiet_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &selected {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run));
        let took = started.elapsed();
        let budget = c.budget.map_or("no limit".to_string(), |b| format!("{:.0} s", b.as_secs_f64()));
        let (ok, detail) = match outcome {
            Ok(detail) => match c.budget {
                Some(b) if took > b => (false, format!("over budget; {detail}")),
                _ => (true, detail),
            },
            Err(e) => (false, panic_text(e)),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {} ({:.1} s / {budget}): {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64()
        );
    }
    panic::set_hook(quiet_hook);
    println!("{} of {} criteria passed", selected.len() - failed, selected.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(e: Box<dyn std::any::Any + Send>) -> String {
    let msg = e
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into());
    msg.replace('\n', " ")
}
