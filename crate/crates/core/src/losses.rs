//! Training objectives over tensors, differentiable end to end.
//!
//! The probability-space functions follow their textbook definitions with
//! inputs clamped to `[eps, 1 - eps]`. The `*_logits` variants compute the
//! same quantities from raw logits in a numerically stable form and are what
//! the training loops use, since a saturated clamp has zero gradient.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Objective for the binary tumor classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLoss {
    #[default]
    Focal,
    Bce,
    /// Focal plus binary cross-entropy.
    FocalBce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    /// (dice, bce)
    pub compound_weights: [f64; 2],
    pub reduction: Reduction,
    pub classification: ClassLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
            compound_weights: [0.5, 0.5],
            reduction: Reduction::Mean,
            classification: ClassLoss::Focal,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::invalid(format!("focal gamma must be >= 0, got {}", self.focal_gamma)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::invalid(format!("focal alpha must be in (0, 1], got {}", self.focal_alpha)));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::invalid(format!("dice smooth must be > 0, got {}", self.dice_smooth)));
        }
        normalized_weights(self.compound_weights).map(|_| ())
    }
}

fn normalized_weights(w: [f64; 2]) -> Result<[f64; 2]> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w[0] + w[1] <= 0.0 {
        return Err(Error::invalid(format!("compound weights must be non-negative with a positive sum, got {w:?}")));
    }
    let s = w[0] + w[1];
    if (s - 1.0).abs() > 1e-12 {
        log::warn!("compound weights {w:?} do not sum to 1, normalizing");
        Ok([w[0] / s, w[1] / s])
    } else {
        Ok(w)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: prediction {:?} vs target {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn reduce(t: &Tensor, r: Reduction) -> Result<Tensor> {
    Ok(match r {
        Reduction::Mean => t.mean_all()?,
        Reduction::Sum => t.sum_all()?,
    })
}

fn clamp(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(EPS, 1.0 - EPS)?)
}

/// Elementwise binary cross-entropy of probabilities; supports soft targets.
pub fn bce_elementwise(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(p, y, "bce")?;
    let p = clamp(p)?;
    let pos = y.mul(&p.log()?)?;
    let neg = y.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

pub fn bce(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    bce_with(p, y, Reduction::Mean)
}

pub fn bce_with(p: &Tensor, y: &Tensor, r: Reduction) -> Result<Tensor> {
    reduce(&bce_elementwise(p, y)?, r)
}

/// Elementwise focal loss. For binary `y` this is
/// `-alpha_t (1 - p_t)^gamma log p_t`; soft targets interpolate the two
/// branches linearly.
pub fn focal_elementwise(p: &Tensor, y: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("focal gamma must be >= 0, got {gamma}")));
    }
    same_shape(p, y, "focal")?;
    let p = clamp(p)?;
    let q = p.affine(-1.0, 1.0)?;
    let pos = (q.powf(gamma)?.mul(&p.log()?)? * alpha)?;
    let neg = (p.powf(gamma)?.mul(&q.log()?)? * (1.0 - alpha))?;
    let l = (y.mul(&pos)? + y.affine(-1.0, 1.0)?.mul(&neg)?)?;
    Ok(l.neg()?)
}

pub fn focal(p: &Tensor, y: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    focal_with(p, y, gamma, alpha, Reduction::Mean)
}

pub fn focal_with(p: &Tensor, y: &Tensor, gamma: f64, alpha: f64, r: Reduction) -> Result<Tensor> {
    reduce(&focal_elementwise(p, y, gamma, alpha)?, r)
}

/// Per-image soft Dice loss averaged over the batch. `p` and `m` are
/// (b, ...) with identical shapes.
pub fn soft_dice_loss(p: &Tensor, m: &Tensor, smooth: f64) -> Result<Tensor> {
    if !(smooth > 0.0) {
        return Err(Error::invalid(format!("dice smooth must be > 0, got {smooth}")));
    }
    same_shape(p, m, "soft dice")?;
    let b = p.dim(0)?;
    let p = p.reshape((b, ()))?;
    let m = m.reshape((b, ()))?;
    let inter = p.mul(&m)?.sum(1)?;
    let num = (inter * 2.0)? + smooth;
    let den = ((p.sum(1)? + m.sum(1)?)? + smooth)?;
    Ok(num?.div(&den)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// `w_dice * soft_dice + w_bce * bce` on probabilities.
pub fn compound_seg_loss(p: &Tensor, m: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let [wd, wb] = normalized_weights(cfg.compound_weights)?;
    let d = soft_dice_loss(p, m, cfg.dice_smooth)?;
    let b = bce_with(p, m, cfg.reduction)?;
    Ok(((d * wd)? + (b * wb)?)?)
}

/// Stable `-[y log σ(z) + (1 - y) log σ(-z)]`, elementwise.
pub fn bce_logits_elementwise(z: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(z, y, "bce")?;
    let softplus = z.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(((z.relu()? - z.mul(y)?)? + softplus)?)
}

/// Stable `log σ(z)`.
fn log_sigmoid(z: &Tensor) -> Result<Tensor> {
    let softplus = z.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((z.neg()?.relu()?.neg()? - softplus)?)
}

pub fn bce_logits(z: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(bce_logits_elementwise(z, y)?.mean_all()?)
}

pub fn focal_logits(z: &Tensor, y: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("focal gamma must be >= 0, got {gamma}")));
    }
    same_shape(z, y, "focal")?;
    let log_p = log_sigmoid(z)?;
    let log_q = log_sigmoid(&z.neg()?)?;
    let pos = ((log_q.affine(gamma, 0.0)?.exp()?).mul(&log_p)? * alpha)?;
    let neg = ((log_p.affine(gamma, 0.0)?.exp()?).mul(&log_q)? * (1.0 - alpha))?;
    Ok((y.mul(&pos)? + y.affine(-1.0, 1.0)?.mul(&neg)?)?.neg()?.mean_all()?)
}

/// Classification objective selected by `cfg.classification`, from logits.
pub fn classification_loss(z: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    match cfg.classification {
        ClassLoss::Focal => focal_logits(z, y, cfg.focal_gamma, cfg.focal_alpha),
        ClassLoss::Bce => bce_logits(z, y),
        ClassLoss::FocalBce => Ok((focal_logits(z, y, cfg.focal_gamma, cfg.focal_alpha)? + bce_logits(z, y)?)?),
    }
}

/// Compound segmentation objective from logits.
pub fn compound_seg_loss_logits(z: &Tensor, m: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let [wd, wb] = normalized_weights(cfg.compound_weights)?;
    let p = candle_nn::ops::sigmoid(z)?;
    let d = soft_dice_loss(&p, m, cfg.dice_smooth)?;
    let b = reduce(&bce_logits_elementwise(z, m)?, cfg.reduction)?;
    Ok(((d * wd)? + (b * wb)?)?)
}

/// Sigmoid BCE over (b, k) logits averaged over the known labels only.
/// `labels` holds one row per sample with `None` for unknown entries.
pub fn masked_multilabel_bce(z: &Tensor, labels: &[Vec<Option<f64>>]) -> Result<Tensor> {
    let (b, k) = z.dims2()?;
    if labels.len() != b || labels.iter().any(|r| r.len() != k) {
        return Err(Error::Shape(format!("labels are not {b}x{k}")));
    }
    let mut y = Vec::with_capacity(b * k);
    let mut mask = Vec::with_capacity(b * k);
    for v in labels.iter().flatten() {
        y.push(v.unwrap_or(0.0));
        mask.push(if v.is_some() { 1.0 } else { 0.0 });
    }
    let known: f64 = mask.iter().sum();
    if known == 0.0 {
        return Err(Error::Undefined("every label in the batch is unknown".into()));
    }
    let y = Tensor::from_vec(y, (b, k), z.device())?.to_dtype(z.dtype())?;
    let mask = Tensor::from_vec(mask, (b, k), z.device())?.to_dtype(z.dtype())?;
    let l = bce_logits_elementwise(z, &y)?.mul(&mask)?.sum_all()?;
    Ok((l / known)?)
}
