//! Evaluation mathematics on plain `f64` slices and binary masks.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::BinaryMask;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Thresholded binary metrics. Rates whose denominator is zero are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassificationMetrics {
    /// Alias: sensitivity is recall.
    pub fn sensitivity(&self) -> Option<f64> {
        self.recall
    }
}

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationMetrics> {
    check_pairs(scores, labels)?;
    let c = Confusion::from_scores(scores, labels, threshold);
    let positives = c.tp + c.fn_;
    let negatives = c.tn + c.fp;
    if positives == 0 || negatives == 0 {
        log::warn!("single-class labels: some rate metrics are undefined");
    }
    Ok(ClassificationMetrics {
        threshold,
        confusion: c,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, positives),
        specificity: ratio(c.tn, negatives),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    })
}

/// 1-based ranks with ties sharing their average rank.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged; kept as a half-integer.
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn auc_from_ranks(ranks: &[f64], labels: &[bool]) -> Result<f64> {
    let np = labels.iter().filter(|&&y| y).count();
    let nn = labels.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    auc_from_ranks(&midranks(scores), labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Distinct scores in descending order with cumulative (tp, fp) counts when
/// predicting positive for every score at or above each.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (n, &i) in idx.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last = n + 1 == idx.len() || scores[idx[n + 1]] != scores[i];
        if last {
            out.push((scores[i], tp, fp));
        }
    }
    out
}

/// ROC points from the strictest threshold to the loosest, starting at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    check_pairs(scores, labels)?;
    let np = labels.iter().filter(|&&y| y).count();
    let nn = labels.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::Undefined("ROC curve needs both classes".into()));
    }
    let mut pts = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    pts.extend(sweep(scores, labels).into_iter().map(|(t, tp, fp)| RocPoint {
        threshold: t,
        fpr: fp as f64 / nn as f64,
        tpr: tp as f64 / np as f64,
    }));
    Ok(pts)
}

/// One precision/recall point per distinct score threshold, descending.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check_pairs(scores, labels)?;
    let np = labels.iter().filter(|&&y| y).count();
    if np == 0 || np == labels.len() {
        return Err(Error::Undefined("PR curve needs both classes".into()));
    }
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(t, tp, fp)| PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / np as f64,
        })
        .collect())
}

/// Step-wise area under the PR curve.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = pr_curve(scores, labels)?;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in pts {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    pub fn of(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                pred.height(), pred.width(), truth.height(), truth.width()
            )));
        }
        let mut c = PixelCounts::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    fn add(&mut self, o: &PixelCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// (dice, iou, vacuous) with both-empty defined as 1.
    fn overlap(&self) -> (f64, f64, bool) {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            return (1.0, 1.0, true);
        }
        (
            (2 * self.tp) as f64 / den as f64,
            self.tp as f64 / (self.tp + self.fp + self.fn_) as f64,
            false,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub counts: PixelCounts,
    pub dice: f64,
    pub iou: f64,
    /// Undefined when the ground truth is empty.
    pub sensitivity: Option<f64>,
    /// Undefined when the ground truth covers every pixel.
    pub specificity: Option<f64>,
    /// Both masks empty; Dice and IoU set to 1 by convention.
    pub vacuous: bool,
}

pub fn seg_metrics(pred: &BinaryMask, truth: &BinaryMask) -> Result<SegMetrics> {
    let c = PixelCounts::of(pred, truth)?;
    let (dice, iou, vacuous) = c.overlap();
    Ok(SegMetrics {
        counts: c,
        dice,
        iou,
        sensitivity: (c.tp + c.fn_ > 0).then(|| c.tp as f64 / (c.tp + c.fn_) as f64),
        specificity: (c.tn + c.fp > 0).then(|| c.tn as f64 / (c.tn + c.fp) as f64),
        vacuous,
    })
}

/// Dataset aggregation: mean of per-image values and globally pooled counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegSummary {
    pub images: usize,
    pub vacuous_images: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
    pub pooled_dice: f64,
    pub pooled_iou: f64,
    pub pooled_sensitivity: Option<f64>,
    pub pooled_specificity: Option<f64>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn seg_summary(per_image: &[SegMetrics]) -> Result<SegSummary> {
    if per_image.is_empty() {
        return Err(Error::invalid("no images to summarize"));
    }
    let n = per_image.len() as f64;
    let mut pooled = PixelCounts::default();
    for m in per_image {
        pooled.add(&m.counts);
    }
    let (pd, pi, _) = pooled.overlap();
    Ok(SegSummary {
        images: per_image.len(),
        vacuous_images: per_image.iter().filter(|m| m.vacuous).count(),
        mean_dice: per_image.iter().map(|m| m.dice).sum::<f64>() / n,
        mean_iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
        mean_sensitivity: mean_defined(per_image.iter().map(|m| m.sensitivity)),
        mean_specificity: mean_defined(per_image.iter().map(|m| m.specificity)),
        pooled_dice: pd,
        pooled_iou: pi,
        pooled_sensitivity: (pooled.tp + pooled.fn_ > 0).then(|| pooled.tp as f64 / (pooled.tp + pooled.fn_) as f64),
        pooled_specificity: (pooled.tn + pooled.fp > 0).then(|| pooled.tn as f64 / (pooled.tn + pooled.fp) as f64),
    })
}

/// True pixels with at least one false (or out-of-image) 4-neighbor.
pub fn boundary_pixels(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height(), m.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                k = 0;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] {
                    if k == 0 {
                        v[0] = q;
                        z[0] = f64::NEG_INFINITY;
                        z[1] = f64::INFINITY;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            },
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest site.
fn distance_map(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut g = vec![f64::INFINITY; h * w];
    for &(y, x) in sites {
        g[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            g[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&g[y * w..(y + 1) * w], &mut row);
        g[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    g.iter().map(|d| d.sqrt()).collect()
}

/// Mean symmetric nearest-boundary distance in pixels.
pub fn boundary_error(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    PixelCounts::of(pred, truth)?;
    let bp = boundary_pixels(pred);
    let bt = boundary_pixels(truth);
    if bp.is_empty() || bt.is_empty() {
        return Err(Error::Undefined("boundary error needs two non-empty masks".into()));
    }
    let (h, w) = (pred.height(), pred.width());
    let dt = distance_map(h, w, &bt);
    let dp = distance_map(h, w, &bp);
    let a = bp.iter().map(|&(y, x)| dt[y * w + x]).sum::<f64>() / bp.len() as f64;
    let b = bt.iter().map(|&(y, x)| dp[y * w + x]).sum::<f64>() / bt.len() as f64;
    Ok((a + b) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub p_value: f64,
    pub n_perms: usize,
    pub seed: u64,
    /// Permutations whose AUC reached the observed value.
    pub n_at_least: usize,
}

/// Label-permutation test of the AUC with the add-one estimate
/// `(1 + #{perm >= observed}) / (n + 1)`. Trial `i` shuffles with its own
/// stream of the seeded generator, so the result does not depend on
/// scheduling.
pub fn permutation_test(scores: &[f64], labels: &[bool], n: usize, seed: u64) -> Result<PermutationResult> {
    check_pairs(scores, labels)?;
    if n == 0 {
        return Err(Error::invalid("permutation count must be >= 1"));
    }
    let ranks = midranks(scores);
    let observed = auc_from_ranks(&ranks, labels)?;
    let n_at_least = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut perm = labels.to_vec();
            perm.shuffle(&mut rng);
            auc_from_ranks(&ranks, &perm).expect("class counts preserved") >= observed
        })
        .filter(|&ge| ge)
        .count();
    Ok(PermutationResult {
        observed,
        p_value: (1 + n_at_least) as f64 / (n + 1) as f64,
        n_perms: n,
        seed,
        n_at_least,
    })
}

/// Machine-readable bundle of everything an evaluation produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub scalars: BTreeMap<String, f64>,
    /// Metrics that could not be computed, with the reason.
    #[serde(default)]
    pub undefined: BTreeMap<String, String>,
    #[serde(default)]
    pub per_class: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub roc: BTreeMap<String, Vec<RocPoint>>,
    #[serde(default)]
    pub pr: BTreeMap<String, Vec<PrPoint>>,
    #[serde(default)]
    pub permutation: BTreeMap<String, PermutationResult>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self { task: task.into(), ..Default::default() }
    }

    pub fn set(&mut self, name: &str, v: Option<f64>, why: &str) {
        match v {
            Some(v) => {
                self.scalars.insert(name.to_string(), v);
            }
            None => {
                self.undefined.insert(name.to_string(), why.to_string());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Writes one CSV per curve into `dir` (`roc_<name>.csv`, `pr_<name>.csv`).
    pub fn save_curves(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, pts) in &self.roc {
            let mut s = String::from("threshold,fpr,tpr\n");
            for p in pts {
                s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
            }
            let path = dir.join(format!("roc_{name}.csv"));
            std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        for (name, pts) in &self.pr {
            let mut s = String::from("threshold,precision,recall\n");
            for p in pts {
                s.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
            }
            let path = dir.join(format!("pr_{name}.csv"));
            std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    /// Adds accuracy/precision/recall/specificity/F1, AUC and curves under
    /// an optional name prefix.
    pub fn add_binary(&mut self, prefix: &str, scores: &[f64], labels: &[bool], threshold: f64) -> Result<()> {
        let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        let m = classification_metrics(scores, labels, threshold)?;
        self.scalars.insert(key("accuracy"), m.accuracy);
        self.set(&key("precision"), m.precision, "no positive predictions");
        self.set(&key("recall"), m.recall, "no positive labels");
        self.set(&key("specificity"), m.specificity, "no negative labels");
        self.set(&key("f1"), m.f1, "no positives predicted or present");
        let curve_name = if prefix.is_empty() { "all".to_string() } else { prefix.to_string() };
        match roc_auc(scores, labels) {
            Ok(a) => {
                self.scalars.insert(key("auc"), a);
                self.roc.insert(curve_name.clone(), roc_curve(scores, labels)?);
                self.pr.insert(curve_name, pr_curve(scores, labels)?);
            }
            Err(e) => {
                self.undefined.insert(key("auc"), e.to_string());
            }
        }
        Ok(())
    }
}
