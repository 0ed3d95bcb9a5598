//! The HTTP contract, driven over real sockets against toy models.

use crate::common::*;

/// Median single-image latency ceiling on one CPU core.
const LATENCY_BUDGET_MS: f64 = 500.0;

pub fn run() -> String {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    rt.block_on(async {
        let fx = fixture();
        let mut lines = vec![check_health(&fx).await];
        let base = spawn(loaded_state(&fx)).await;
        lines.push(check_classify(&base).await);
        lines.push(check_segment(&base).await);
        lines.push(check_subtype(&base).await);
        lines.push(check_explain(&base).await);
        lines.push(check_concurrency(&base).await);
        let median = median_latency(&base).await;
        assert!(median < LATENCY_BUDGET_MS, "median classify latency {median:.1} ms over {LATENCY_BUDGET_MS} ms");
        lines.push(format!("median latency {median:.1} ms"));
        lines.join("; ")
    })
}
