//! Command-line entry points.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataio::{
    load_labelme, load_manifest, patient_split, polygon_to_mask, DatasetManifest, Split, DEFAULT_SPLIT_RATIOS,
};
use crate::metrics::permutation_test;
use crate::nn::{Checkpoint, Model, Task};
use crate::serve::ServeConfig;
use crate::synth::{generate, write_corpus, SynthSpec};
use crate::train::ablate::{CLASSIFICATION_ROWS, SEGMENTATION_ROWS};
use crate::train::{ablate, crossval, evaluate, fit_named, fold_indices, predict, Dataset, Target};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cystonet", version, about = "Cystoscopy image classification, lesion segmentation and marker subtyping")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub device: Option<String>,
    /// Reduced-scale mode: 64 px inputs and narrow layers.
    #[arg(long, global = true)]
    pub toy: bool,
    /// Output directory (or file, for export).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize LabelMe polygons into masks and split the manifest by patient.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Write a synthetic corpus with masks, annotations and a manifest.
    Synth {
        #[arg(long, default_value = "classify")]
        task: String,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Train one model from the config.
    Train,
    /// Patient-level k-fold cross-validation.
    Crossval {
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train the base config plus each override row.
    Ablate {
        /// Override rows such as `selfatt+attgate` or `lr0=1e-3|1e-4`.
        #[arg(long = "row")]
        rows: Vec<String>,
        /// Built-in row set: `segmentation` or `classification`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Label-permutation significance test of the AUC.
    Permtest {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(short = 'n', long, default_value_t = 1000)]
        perms: usize,
        /// Marker index for subtyping checkpoints.
        #[arg(long, default_value_t = 0)]
        marker: usize,
    },
    /// Convert a checkpoint into the single-file portable form.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        host: Option<String>,
        /// Keep a copy of every upload here.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory or exported file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `all`, `train`, `val` or `test`.
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print one `error: kind=<kind> msg="<message>"` line to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first:?}");
            return 2;
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg:?}", e.kind());
            1
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(v)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare { manifest, annotations } => {
            let out = cli.out.clone().ok_or_else(|| Error::Config("prepare needs --out".into()))?;
            let m = prepare(manifest, annotations, &out, cli.seed.unwrap_or(0))?;
            println!("{}", out.join("manifest.json").display());
            log::info!("prepared {} records", m.len());
            Ok(())
        }
        Command::Synth { task, images, side } => {
            let out = cli.out.clone().ok_or_else(|| Error::Config("synth needs --out".into()))?;
            let task = Task::parse(task)?;
            let samples = generate(&SynthSpec::new(task, *images, *side, cli.seed.unwrap_or(0)))?;
            write_corpus(&out, task, &samples)?;
            println!("{}", out.join("manifest.json").display());
            Ok(())
        }
        Command::Train => train(&experiment(&cli)?),
        Command::Crossval { folds } => {
            let mut cfg = experiment(&cli)?;
            if let Some(k) = folds {
                cfg.data.folds = *k;
            }
            run_crossval(&cfg)
        }
        Command::Ablate { rows, preset } => {
            let mut cfg = experiment(&cli)?;
            let preset_rows: &[&str] = match preset.as_deref() {
                None => &[],
                Some("segmentation") => &SEGMENTATION_ROWS,
                Some("classification") => &CLASSIFICATION_ROWS,
                Some(p) => return Err(Error::invalid(format!("unknown preset '{p}' (segmentation or classification)"))),
            };
            cfg.ablate.extend(preset_rows.iter().map(|s| s.to_string()));
            cfg.ablate.extend(rows.iter().cloned());
            run_ablate(&cfg)
        }
        Command::Eval(args) => {
            let (model, data) = load_eval(args)?;
            let (report, _) = evaluate(&model, &data, 16, &Default::default(), args.threshold)?;
            if let Some(out) = &cli.out {
                write_json(&out.join("metrics.json"), &report)?;
                report.save_curves(out)?;
            }
            print_json(&report)
        }
        Command::Permtest { eval, perms, marker } => {
            let (model, data) = load_eval(eval)?;
            let preds = predict(&model, &data, 16, &Default::default())?;
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (s, p) in data.samples.iter().zip(&preds.scores) {
                match &s.target {
                    Target::Binary(y) => {
                        scores.push(p[0]);
                        labels.push(*y >= 0.5);
                    }
                    Target::Markers(m) => {
                        let y = m.get(*marker).ok_or_else(|| Error::invalid(format!("marker index {marker} out of range")))?;
                        if let Some(y) = y {
                            scores.push(p[*marker]);
                            labels.push(*y >= 0.5);
                        }
                    }
                    Target::Mask(_) => return Err(Error::invalid("permtest applies to classification and subtyping checkpoints")),
                }
            }
            let r = permutation_test(&scores, &labels, *perms, cli.seed.unwrap_or(0))?;
            if let Some(out) = &cli.out {
                write_json(&out.join("permtest.json"), &r)?;
            }
            print_json(&r)
        }
        Command::Export { checkpoint } => {
            let out = cli.out.clone().ok_or_else(|| Error::Config("export needs --out <file>".into()))?;
            let ck = Checkpoint::open(checkpoint)?;
            ck.export(&out)?;
            // Loading it back proves the file is complete.
            Checkpoint::import(&out)?.to_model()?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Serve { registry, port, workers, host, audit } => {
            let mut sc = ServeConfig::from_env(registry.clone())?;
            if let Some(p) = port {
                sc.port = *p;
            }
            if let Some(w) = workers {
                sc.workers = (*w).max(1);
            }
            if let Some(h) = host {
                sc.host = h.clone();
            }
            sc.audit_dir = audit.clone();
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(sc.workers)
                .enable_all()
                .build()
                .map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(crate::serve::run(sc))
        }
    }
}

/// Loads `--config` and applies the global flag overrides.
pub fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("this command needs --config <file.toml>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.device {
        cfg.device = d.clone();
    }
    if cli.toy {
        cfg.toy = true;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.resolve()
}

/// All task records of the experiment's data source.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Option<DatasetManifest>)> {
    let side = cfg.model.input_side;
    match (&cfg.data.manifest, cfg.data.synthetic) {
        (Some(p), _) => {
            let mut m = load_manifest(p)?;
            if m.entries.iter().all(|e| e.split.is_none()) {
                m = patient_split(&m, DEFAULT_SPLIT_RATIOS, cfg.seed)?;
            }
            Ok((Dataset::from_manifest(&m, cfg.task(), side)?, Some(m)))
        }
        (None, Some(n)) => {
            let samples = generate(&SynthSpec::new(cfg.task(), n, side.max(64), cfg.seed))?;
            Ok((Dataset::from_synth(cfg.task(), side, &samples)?, None))
        }
        (None, None) => Err(Error::Config("no data source".into())),
    }
}

/// Train and validation sets: the manifest's own splits, or a
/// patient-disjoint 80/20 cut of a synthetic corpus.
pub fn train_val(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (data, manifest) = load_dataset(cfg)?;
    match manifest {
        Some(m) => {
            let ids = |s: Split| -> std::collections::HashSet<String> {
                m.entries.iter().filter(|e| e.split() == s).map(|e| e.id.clone()).collect()
            };
            let (tr, va) = (ids(Split::Train), ids(Split::Val));
            let pick = |set: &std::collections::HashSet<String>| -> Vec<usize> {
                (0..data.len()).filter(|&i| set.contains(data.samples[i].id())).collect()
            };
            let (t, v) = (data.subset(&pick(&tr)), data.subset(&pick(&va)));
            if t.is_empty() || v.is_empty() {
                return Err(Error::validation("manifest has no usable train or val records for this task"));
            }
            Ok((t, v))
        }
        None => {
            let folds = fold_indices(&data, 5, cfg.seed)?;
            let (t, v) = &folds[0];
            Ok((data.subset(t), data.subset(v)))
        }
    }
}

fn copy_config(cfg: &ExperimentConfig) -> Result<()> {
    write_text(&cfg.out.join("config.toml"), &cfg.to_toml()?)
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let (tr, va) = train_val(cfg)?;
    copy_config(cfg)?;
    let model = Model::build(&cfg.model, cfg.seed)?;
    let (ck, report) = fit_named(&cfg.name, &model, &tr, &va, &cfg.train)?;
    ck.save(cfg.out.join("checkpoint"))?;
    write_json(&cfg.out.join("report.json"), &report)?;
    write_json(&cfg.out.join("metrics.json"), &report.metrics)?;
    report.metrics.save_curves(cfg.out.join("curves"))?;
    print_json(&serde_json::json!({
        "checkpoint": cfg.out.join("checkpoint"),
        "best_epoch": report.best_epoch,
        "epochs_run": report.epochs_run,
        "metrics": report.metrics.scalars,
    }))
}

pub fn run_crossval(cfg: &ExperimentConfig) -> Result<()> {
    let (data, _) = load_dataset(cfg)?;
    copy_config(cfg)?;
    let build = |_fold: usize| Model::build(&cfg.model, cfg.seed);
    let r = crossval(&build, &data, cfg.data.folds, &cfg.train)?;
    write_json(&cfg.out.join("crossval.json"), &r)?;
    print_json(&r.pooled)
}

pub fn run_ablate(cfg: &ExperimentConfig) -> Result<()> {
    // Rejects bad rows before any data is touched.
    crate::train::plan(&cfg.model, &cfg.train, &cfg.ablate)?;
    let (tr, va) = train_val(cfg)?;
    copy_config(cfg)?;
    let table = ablate(&cfg.model, &cfg.train, &cfg.ablate, &tr, &va)?;
    write_json(&cfg.out.join("ablation.json"), &table)?;
    let md = table.render();
    write_text(&cfg.out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn load_eval(args: &EvalArgs) -> Result<(Model, Dataset)> {
    let ck = Checkpoint::open(&args.checkpoint)?;
    let model = ck.to_model()?;
    let m = load_manifest(&args.manifest)?;
    let m = match args.split.as_str() {
        "all" => m,
        "train" => m.with_split(Split::Train),
        "val" => m.with_split(Split::Val),
        "test" => m.with_split(Split::Test),
        s => return Err(Error::invalid(format!("unknown split '{s}' (all, train, val or test)"))),
    };
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {} outside (0, 1)", args.threshold)));
    }
    let data = Dataset::from_manifest(&m, model.task(), model.config.input_side)?;
    Ok((model, data))
}

/// Rasterizes `<annotations>/<id>.json` for every entry into `<out>/masks`,
/// splits by patient when the input carries no splits, and writes
/// `<out>/manifest.json`. Image paths in the output are absolute.
pub fn prepare(manifest: &Path, annotations: &Path, out: &Path, seed: u64) -> Result<DatasetManifest> {
    let m = load_manifest(manifest)?;
    if !annotations.is_dir() {
        return Err(Error::io(annotations, std::io::Error::new(std::io::ErrorKind::NotFound, "annotation directory not found")));
    }
    let masks = out.join("masks");
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut entries = Vec::with_capacity(m.len());
    for e in &m.entries {
        let img = m.image_path(e);
        if !img.is_file() {
            return Err(Error::io(&img, std::io::Error::new(std::io::ErrorKind::NotFound, format!("image of record {} not found", e.id))));
        }
        let img = std::path::absolute(&img).map_err(|err| Error::io(&img, err))?;
        let (w, h) = image::image_dimensions(&img).map_err(|err| Error::Validation(format!("{}: {err}", img.display())))?;
        let existing_mask = m.mask_path(e);
        let mut e = e.clone();
        e.image_path = img;
        if let Some(p) = existing_mask {
            e.mask_path = Some(std::path::absolute(&p).map_err(|err| Error::io(&p, err))?);
        }
        let ann = annotations.join(format!("{}.json", e.id));
        if ann.is_file() {
            let polys = load_labelme(&ann)?.polygons(h as usize, w as usize);
            let mask = polygon_to_mask(&polys, h as usize, w as usize);
            let rel = PathBuf::from("masks").join(format!("{}.png", e.id));
            mask.save_png(&out.join(&rel))?;
            e.mask_path = Some(rel);
        }
        entries.push(e);
    }
    let mut prepared = DatasetManifest::new(entries, out)?;
    if prepared.entries.iter().all(|e| e.split.is_none()) {
        prepared = patient_split(&prepared, DEFAULT_SPLIT_RATIOS, seed)?;
    }
    prepared.validate()?;
    prepared.save(&out.join("manifest.json"))?;
    Ok(prepared)
}
