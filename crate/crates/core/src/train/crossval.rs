use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::data::{Dataset, Target};
use super::fit::{fit_named, RunReport, TrainConfig};
use crate::dataio::{kfold_patient, DatasetManifest, ManifestEntry};
use crate::metrics::MetricReport;
use crate::nn::Model;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub report: Option<RunReport>,
    /// Set when the fold failed; the other folds still run.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k: usize,
    pub folds: Vec<FoldOutcome>,
    /// Mean of each metric over successful folds; `<name>.std` holds the
    /// sample standard deviation.
    pub pooled: MetricReport,
}

impl CrossvalReport {
    pub fn reports(&self) -> Vec<&RunReport> {
        self.folds.iter().filter_map(|f| f.report.as_ref()).collect()
    }

    pub fn failed(&self) -> Vec<usize> {
        self.folds.iter().filter(|f| f.error.is_some()).map(|f| f.fold).collect()
    }
}

/// Index lists `(train, val)` per fold, patient-disjoint and stratified the
/// same way as manifest folds.
pub fn fold_indices(data: &Dataset, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let entries = data
        .samples
        .iter()
        .map(|s| {
            let mut e = ManifestEntry::new(s.id(), s.patient_id(), format!("{}.png", s.id()));
            match &s.target {
                Target::Binary(y) => e.tumor_label = Some(u8::from(*y >= 0.5)),
                Target::Mask(_) => {}
                Target::Markers(m) => {
                    let f = |v: Option<f32>| v.map(|v| u8::from(v >= 0.5));
                    e.her2 = f(m[0]);
                    e.ki67 = f(m[1]);
                    e.p53 = f(m[2]);
                }
            }
            e
        })
        .collect();
    let proxy = DatasetManifest { entries, base_dir: Default::default() };
    let pos: HashMap<&str, usize> = data.samples.iter().enumerate().map(|(i, s)| (s.id(), i)).collect();
    if pos.len() != data.len() {
        return Err(Error::validation("sample ids must be unique for cross-validation"));
    }
    let idx = |m: &DatasetManifest| m.entries.iter().map(|e| pos[e.id.as_str()]).collect::<Vec<_>>();
    Ok(kfold_patient(&proxy, k, seed)?.iter().map(|(t, v)| (idx(t), idx(v))).collect())
}

/// Mean and sample standard deviation of every scalar shared by all reports.
pub fn pool(task: &str, reports: &[&MetricReport]) -> MetricReport {
    let mut out = MetricReport::new(task);
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.scalars {
            values.entry(k.as_str()).or_default().push(*v);
        }
    }
    for (k, v) in values {
        if v.len() != reports.len() {
            out.undefined.insert(k.to_string(), format!("defined in {} of {} folds", v.len(), reports.len()));
            continue;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        out.scalars.insert(k.to_string(), mean);
        out.scalars.insert(format!("{k}.std"), std);
    }
    out.scalars.insert("folds".into(), reports.len() as f64);
    out
}

/// Patient-level k-fold cross-validation. `build` receives the fold index
/// and returns a fresh model.
pub fn crossval(build: &dyn Fn(usize) -> Result<Model>, data: &Dataset, k: usize, cfg: &TrainConfig) -> Result<CrossvalReport> {
    cfg.validate()?;
    let folds = fold_indices(data, k, cfg.seed)?;
    let mut out = Vec::with_capacity(k);
    for (fold, (tr, va)) in folds.iter().enumerate() {
        let run = build(fold).and_then(|m| fit_named(&format!("fold{}", fold + 1), &m, &data.subset(tr), &data.subset(va), cfg));
        let (report, error) = match run {
            Ok((_, r)) => (Some(r), None),
            Err(e) => {
                log::warn!("fold {} failed: {e}", fold + 1);
                (None, Some(e.to_string()))
            }
        };
        out.push(FoldOutcome { fold, train_size: tr.len(), val_size: va.len(), report, error });
    }
    let metrics: Vec<&MetricReport> = out.iter().filter_map(|f| f.report.as_ref().map(|r| &r.metrics)).collect();
    if metrics.is_empty() {
        return Err(Error::Undefined(format!("all {k} folds failed: {}", out[0].error.clone().unwrap_or_default())));
    }
    let pooled = pool(cfg.task.name(), &metrics);
    Ok(CrossvalReport { k, folds: out, pooled })
}

/// Cross-validation over a manifest, loading the task's records once.
pub fn crossval_manifest(
    build: &dyn Fn(usize) -> Result<Model>,
    m: &DatasetManifest,
    side: usize,
    k: usize,
    cfg: &TrainConfig,
) -> Result<CrossvalReport> {
    let data = Dataset::from_manifest(m, cfg.task, side)?;
    crossval(build, &data, k, cfg)
}
