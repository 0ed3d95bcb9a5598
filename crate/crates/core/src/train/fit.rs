use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{assemble, BatchData, Dataset};
use super::schedule::{cosine_lr, EarlyStopper, StopDecision};
use crate::augment::{cutmix_with, mixup_with, rng_for, sample_cut_box, AugmentConfig, Batch, MixedBatch};
use crate::dataio::BinaryMask;
use crate::losses::{classification_loss, compound_seg_loss_logits, masked_multilabel_bce, LossConfig};
use crate::metrics::{boundary_error, seg_metrics, seg_summary, MetricReport};
use crate::nn::{Checkpoint, Ctx, EpochRecord, Model, Task};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    #[default]
    None,
    Mixup,
    Cutmix,
    /// MixUp or CutMix, chosen per batch with equal probability.
    Both,
}

/// Which validation quantity picks the returned checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    ValLoss,
    /// The task's headline metric (AUC, Dice or mean AUC), higher is better.
    Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub mix: MixMode,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub selection: Selection,
    /// Decision threshold used for validation metrics.
    pub threshold: f64,
    /// Stop as soon as the headline validation metric reaches this value.
    pub target_metric: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(Task::Classify)
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        let (batch_size, schedule, augment, mix) = match task {
            Task::Classify => (16, Schedule::Cosine, AugmentConfig::classification(), MixMode::Both),
            Task::Segment => (8, Schedule::Constant, AugmentConfig::segmentation(), MixMode::None),
            Task::Subtype => (16, Schedule::Cosine, AugmentConfig::subtyping(), MixMode::None),
        };
        Self {
            task,
            epochs: 100,
            batch_size,
            lr0: 1e-4,
            lr_min: 0.0,
            schedule,
            early_stop_patience: 15,
            seed: 0,
            augment,
            loss: LossConfig::default(),
            mix,
            mixup_alpha: crate::augment::DEFAULT_MIXUP_ALPHA,
            cutmix_alpha: crate::augment::DEFAULT_CUTMIX_ALPHA,
            selection: Selection::ValLoss,
            threshold: 0.5,
            target_metric: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config(format!("need lr0 > 0 and 0 <= lr_min <= lr0, got {} / {}", self.lr0, self.lr_min)));
        }
        if self.mix != MixMode::None && self.task == Task::Subtype {
            return Err(Error::Config("batch mixing applies to classification and segmentation only".into()));
        }
        if !(self.mixup_alpha > 0.0 && self.cutmix_alpha > 0.0) {
            return Err(Error::Config("mixing alphas must be > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if let Some(t) = self.target_metric {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("target_metric {t} outside (0, 1]")));
            }
        }
        self.augment.validate()?;
        self.loss.validate()
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Cosine => cosine_lr(epoch, self.epochs, self.lr0, self.lr_min),
            Schedule::Constant => Ok(self.lr0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub task: Task,
    pub config: TrainConfig,
    pub model: crate::nn::ModelConfig,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned weights.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub metrics: MetricReport,
    pub wall_clock_s: f64,
    pub lr_trace: Vec<f64>,
    /// Digest of the first training batch of the first epoch.
    pub first_batch: String,
}

impl RunReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.history.iter().filter_map(|e| e.val_loss).collect()
    }
}

const MIX_STREAM: u64 = 0x6d69_7800_0000_0000;
const ORDER_STREAM: u64 = 0x6f72_6400_0000_0000;
const DROPOUT_STREAM: u64 = 0x6472_6f70_0000_0000;

fn mix_batch(b: &mut BatchData, cfg: &TrainConfig, epoch: u64, batch_idx: u64) -> Result<()> {
    if cfg.mix == MixMode::None || b.n < 2 {
        return Ok(());
    }
    let mut rng = rng_for(cfg.seed ^ MIX_STREAM, (epoch << 32) | batch_idx);
    let use_cutmix = match cfg.mix {
        MixMode::Mixup => false,
        MixMode::Cutmix => true,
        _ => rng.random_bool(0.5),
    };
    let k = b.k();
    let mut batch = Batch::new(std::mem::take(&mut b.images), std::mem::take(&mut b.labels), (b.n, 3, b.side, b.side), k)?;
    if let Some(m) = b.masks.take() {
        batch = batch.with_masks(m)?;
    }
    let alpha = if use_cutmix { cfg.cutmix_alpha } else { cfg.mixup_alpha };
    let lambda = rand_distr::Distribution::sample(
        &rand_distr::Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?,
        &mut rng,
    );
    let mut partner: Vec<usize> = (0..b.n).collect();
    partner.shuffle(&mut rng);
    let mixed: MixedBatch = if use_cutmix {
        let cut = sample_cut_box(b.side, b.side, lambda, &mut rng);
        cutmix_with(&batch, cut, &partner)?
    } else {
        mixup_with(&batch, lambda, &partner)?
    };
    b.images = mixed.images;
    b.labels = mixed.labels;
    b.masks = mixed.masks;
    Ok(())
}

fn batch_loss(model: &Model, b: &BatchData, ctx: &Ctx, loss: &LossConfig) -> Result<Tensor> {
    let (dtype, device) = (model.dtype(), model.device().clone());
    let x = b.image_tensor(dtype, &device)?;
    let z = model.forward(&x, ctx)?;
    match model.task() {
        Task::Classify => classification_loss(&z, &b.label_tensor(dtype, &device)?, loss),
        Task::Segment => {
            let m = b.mask_tensor(dtype, &device)?.expect("segment batch has masks");
            compound_seg_loss_logits(&z, &m, loss)
        }
        Task::Subtype => masked_multilabel_bce(&z, &b.marker_rows()),
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Per-sample outputs of an eval pass.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub ids: Vec<String>,
    /// Classification: one probability. Subtyping: three.
    pub scores: Vec<Vec<f64>>,
    /// Segmentation: per-pixel probabilities at the model side.
    pub maps: Vec<Vec<f32>>,
    pub loss: f64,
}

/// Runs the model in eval mode over `data`, returning probabilities and the
/// mean loss.
pub fn predict(model: &Model, data: &Dataset, batch_size: usize, loss: &LossConfig) -> Result<Predictions> {
    let mut out = Predictions::default();
    let mut total = 0.0;
    let mut counted = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    let ctx = Ctx::eval();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = assemble(data, chunk, None)?;
        let x = b.image_tensor(model.dtype(), model.device())?;
        let z = model.forward(&x, &ctx)?.detach();
        let l = match model.task() {
            Task::Classify => classification_loss(&z, &b.label_tensor(model.dtype(), model.device())?, loss)?,
            Task::Segment => compound_seg_loss_logits(&z, &b.mask_tensor(model.dtype(), model.device())?.expect("masks"), loss)?,
            Task::Subtype => match masked_multilabel_bce(&z, &b.marker_rows()) {
                Ok(l) => l,
                Err(Error::Undefined(_)) => Tensor::new(0f32, model.device())?,
                Err(e) => return Err(e),
            },
        };
        total += scalar(&l)? * b.n as f64;
        counted += b.n;
        let p = crate::nn::sigmoid(&z)?.to_dtype(DType::F32)?;
        match model.task() {
            Task::Segment => {
                let side = b.side;
                let flat = p.reshape((b.n, side * side))?.to_vec2::<f32>()?;
                out.maps.extend(flat);
            }
            _ => {
                for row in p.to_vec2::<f32>()? {
                    out.scores.push(row.into_iter().map(f64::from).collect());
                }
            }
        }
        out.ids.extend(b.ids);
    }
    out.loss = if counted > 0 { total / counted as f64 } else { 0.0 };
    Ok(out)
}

pub const MARKER_NAMES: [&str; 3] = ["her2", "ki67", "p53"];

/// Task metrics of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize, loss: &LossConfig, threshold: f64) -> Result<(MetricReport, Predictions)> {
    let preds = predict(model, data, batch_size, loss)?;
    let mut r = MetricReport::new(model.task().name());
    r.scalars.insert("loss".into(), preds.loss);
    r.scalars.insert("samples".into(), data.len() as f64);
    match model.task() {
        Task::Classify => {
            let scores: Vec<f64> = preds.scores.iter().map(|s| s[0]).collect();
            let labels: Vec<bool> = data
                .samples
                .iter()
                .map(|s| matches!(s.target, super::data::Target::Binary(y) if y >= 0.5))
                .collect();
            r.add_binary("", &scores, &labels, threshold)?;
        }
        Task::Subtype => {
            let mut aucs = Vec::new();
            for (k, name) in MARKER_NAMES.iter().enumerate() {
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for (s, p) in data.samples.iter().zip(&preds.scores) {
                    if let super::data::Target::Markers(m) = &s.target {
                        if let Some(y) = m[k] {
                            scores.push(p[k]);
                            labels.push(y >= 0.5);
                        }
                    }
                }
                if scores.is_empty() {
                    r.undefined.insert(format!("{name}.auc"), "no known labels".into());
                    continue;
                }
                r.add_binary(name, &scores, &labels, threshold)?;
                if let Some(a) = r.get(&format!("{name}.auc")) {
                    aucs.push(a);
                }
            }
            if !aucs.is_empty() {
                r.scalars.insert("mean_auc".into(), aucs.iter().sum::<f64>() / aucs.len() as f64);
            }
        }
        Task::Segment => {
            let side = data.side;
            let mut per = Vec::new();
            let mut be = Vec::new();
            for (i, map) in preds.maps.iter().enumerate() {
                let pred = BinaryMask::from_probabilities(side, side, map, threshold as f32)?;
                let (_, truth) = data.load(i)?;
                let truth = truth.expect("segmentation mask");
                per.push(seg_metrics(&pred, &truth)?);
                if let Ok(e) = boundary_error(&pred, &truth) {
                    be.push(e);
                }
            }
            let s = seg_summary(&per)?;
            r.scalars.insert("dice".into(), s.mean_dice);
            r.scalars.insert("iou".into(), s.mean_iou);
            r.set("sensitivity", s.mean_sensitivity, "no foreground in any mask");
            r.set("specificity", s.mean_specificity, "no background in any mask");
            r.scalars.insert("pooled_dice".into(), s.pooled_dice);
            r.scalars.insert("pooled_iou".into(), s.pooled_iou);
            r.set("pooled_sensitivity", s.pooled_sensitivity, "no foreground");
            r.set("pooled_specificity", s.pooled_specificity, "no background");
            r.scalars.insert("vacuous_images".into(), s.vacuous_images as f64);
            if be.is_empty() {
                r.undefined.insert("boundary_error".into(), "no image with two non-empty masks".into());
            } else {
                r.scalars.insert("boundary_error".into(), be.iter().sum::<f64>() / be.len() as f64);
            }
        }
    }
    Ok((r, preds))
}

/// The metric `Selection::Metric` maximizes.
pub fn headline_metric(task: Task) -> &'static str {
    match task {
        Task::Classify => "auc",
        Task::Segment => "dice",
        Task::Subtype => "mean_auc",
    }
}

/// Trains `model` in place and returns the best-validation checkpoint.
pub fn fit(model: &Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, RunReport)> {
    fit_named("run", model, train, val, cfg)
}

pub fn fit_named(name: &str, model: &Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, RunReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation data must be non-empty"));
    }
    if model.task() != cfg.task || train.task != cfg.task || val.task != cfg.task {
        return Err(Error::invalid(format!(
            "task mismatch: model {}, config {}, data {}/{}",
            model.task(),
            cfg.task,
            train.task,
            val.task
        )));
    }
    let started = Instant::now();
    let params = ParamsAdamW { lr: cfg.lr0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut opt = AdamW::new(model.store().trainable_vars(), params)?;
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut history = Vec::new();
    let mut lr_trace = Vec::new();
    let mut best: Option<(usize, BTreeMap<String, Tensor>)> = None;
    let mut best_metric = f64::NEG_INFINITY;
    let mut first_batch = String::new();
    let mut stopped_early = false;
    let aug = cfg.augment.clone();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        opt.set_learning_rate(lr);
        lr_trace.push(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed ^ ORDER_STREAM, epoch as u64));
        let mut sum = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let aug_seeded = AugmentConfig { seed: aug.seed ^ cfg.seed, ..aug.clone() };
            let mut b = assemble(train, chunk, Some((&aug_seeded, epoch as u64)))?;
            if epoch == 0 && bi == 0 {
                first_batch = b.digest();
            }
            mix_batch(&mut b, cfg, epoch as u64, bi as u64)?;
            let ctx = Ctx::train(cfg.seed ^ DROPOUT_STREAM ^ (((epoch as u64) << 32) | bi as u64));
            let loss = batch_loss(model, &b, &ctx, &cfg.loss)?;
            let lv = scalar(&loss)?;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, batch: bi, loss: lv });
            }
            opt.backward_step(&loss)?;
            sum += lv * b.n as f64;
            seen += b.n;
        }
        let train_loss = sum / seen as f64;
        let (report, _) = evaluate(model, val, cfg.batch_size, &cfg.loss, cfg.threshold)?;
        let val_loss = report.get("loss").unwrap_or(f64::NAN);
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1, batch: usize::MAX, loss: val_loss });
        }
        let mut metrics = BTreeMap::new();
        for k in ["accuracy", "auc", "dice", "iou", "mean_auc"] {
            if let Some(v) = report.get(k) {
                metrics.insert(k.to_string(), v);
            }
        }
        log::info!("{name} epoch {} lr {lr:.2e} train {train_loss:.4} val {val_loss:.4} {metrics:?}", epoch + 1);
        history.push(EpochRecord { epoch: epoch + 1, train_loss, val_loss: Some(val_loss), lr, metrics });
        let decision = stopper.observe(epoch + 1, val_loss);
        let improved = match cfg.selection {
            Selection::ValLoss => decision == StopDecision::Improved,
            Selection::Metric => {
                let m = report.get(headline_metric(cfg.task)).unwrap_or(f64::NEG_INFINITY);
                let better = best.is_none() || m > best_metric;
                if better {
                    best_metric = m;
                }
                better
            }
        };
        if improved {
            best = Some((epoch + 1, model.store().snapshot()?));
        }
        let reached = cfg
            .target_metric
            .is_some_and(|t| report.get(headline_metric(cfg.task)).is_some_and(|m| m >= t));
        if decision == StopDecision::Stop || reached {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, weights) = best.ok_or_else(|| Error::Undefined("no epoch produced a finite validation loss".into()))?;
    model.store().load(&weights)?;
    let (metrics, _) = evaluate(model, val, cfg.batch_size, &cfg.loss, cfg.threshold)?;
    let ck = Checkpoint::from_model(model, history.clone(), best_epoch)?;
    let report = RunReport {
        name: name.to_string(),
        task: cfg.task,
        config: cfg.clone(),
        model: model.config.clone(),
        epochs_run: history.len(),
        history,
        best_epoch,
        stopped_early,
        metrics,
        wall_clock_s: started.elapsed().as_secs_f64(),
        lr_trace,
        first_batch,
    };
    Ok((ck, report))
}
