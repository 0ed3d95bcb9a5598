use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::{Error, Result};

pub const DEFAULT_MIXUP_ALPHA: f64 = 0.2;
pub const DEFAULT_CUTMIX_ALPHA: f64 = 1.0;

/// A dense batch: `images` is `n x c x h x w`, `labels` is `n x k` (one-hot or soft),
/// `masks` (segmentation only) is `n x h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<f32>,
    pub labels: Vec<f32>,
    pub masks: Option<Vec<f32>>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Batch {
    pub fn new(images: Vec<f32>, labels: Vec<f32>, dims: (usize, usize, usize, usize), k: usize) -> Result<Self> {
        let (n, c, h, w) = dims;
        if images.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "batch images hold {} values, expected {n}x{c}x{h}x{w}",
                images.len()
            )));
        }
        if labels.len() != n * k {
            return Err(Error::Shape(format!("labels hold {} values, expected {n}x{k}", labels.len())));
        }
        Ok(Self {
            images,
            labels,
            masks: None,
            n,
            c,
            h,
            w,
            k,
        })
    }

    pub fn with_masks(mut self, masks: Vec<f32>) -> Result<Self> {
        if masks.len() != self.n * self.h * self.w {
            return Err(Error::Shape(format!(
                "masks hold {} values, expected {}x{}x{}",
                masks.len(),
                self.n,
                self.h,
                self.w
            )));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Axis-aligned pasted region, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub images: Vec<f32>,
    pub labels: Vec<f32>,
    pub masks: Option<Vec<f32>>,
    /// Weight of each sample's own content (area-adjusted for CutMix).
    pub lambda: f64,
    /// `partner[i]` is the sample mixed into sample `i`.
    pub partner: Vec<usize>,
    pub cut: Option<CutBox>,
}

fn check(batch: &Batch, alpha: f64) -> Result<()> {
    if batch.n < 2 {
        return Err(Error::invalid(format!("mixing needs a batch of at least 2, got {}", batch.n)));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("mixing alpha must be > 0, got {alpha}")));
    }
    Ok(())
}

fn check_partner(batch: &Batch, partner: &[usize]) -> Result<()> {
    if partner.len() != batch.n || partner.iter().any(|&p| p >= batch.n) {
        return Err(Error::invalid("partner permutation does not match the batch"));
    }
    Ok(())
}

fn shuffled<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

// convex combination clamped to the endpoints so rounding never leaves their range
fn blend(a: f32, b: f32, la: f64, lb: f64) -> f32 {
    let v = (la * a as f64 + lb * b as f64) as f32;
    v.clamp(a.min(b), a.max(b))
}

/// MixUp with `lambda ~ Beta(alpha, alpha)` against a shuffled copy of the batch.
pub fn mixup<R: Rng>(batch: &Batch, alpha: f64, rng: &mut R) -> Result<MixedBatch> {
    check(batch, alpha)?;
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::invalid(e.to_string()))?
        .sample(rng);
    let partner = shuffled(batch.n, rng);
    mixup_with(batch, lambda, &partner)
}

/// MixUp with a fixed coefficient and pairing.
pub fn mixup_with(batch: &Batch, lambda: f64, partner: &[usize]) -> Result<MixedBatch> {
    if batch.n < 2 {
        return Err(Error::invalid(format!("mixing needs a batch of at least 2, got {}", batch.n)));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    check_partner(batch, partner)?;
    let mu = 1.0 - lambda;
    let len = batch.image_len();
    let mut images = Vec::with_capacity(batch.images.len());
    let mut labels = Vec::with_capacity(batch.labels.len());
    for (i, &j) in partner.iter().enumerate() {
        let a = &batch.images[i * len..(i + 1) * len];
        let b = &batch.images[j * len..(j + 1) * len];
        images.extend(a.iter().zip(b).map(|(&x, &y)| blend(x, y, lambda, mu)));
        let la = &batch.labels[i * batch.k..(i + 1) * batch.k];
        let lb = &batch.labels[j * batch.k..(j + 1) * batch.k];
        labels.extend(la.iter().zip(lb).map(|(&x, &y)| blend(x, y, lambda, mu)));
    }
    let masks = batch.masks.as_ref().map(|m| {
        let plane = batch.h * batch.w;
        let mut out = Vec::with_capacity(m.len());
        for (i, &j) in partner.iter().enumerate() {
            let a = &m[i * plane..(i + 1) * plane];
            let b = &m[j * plane..(j + 1) * plane];
            out.extend(a.iter().zip(b).map(|(&x, &y)| blend(x, y, lambda, mu)));
        }
        out
    });
    Ok(MixedBatch {
        images,
        labels,
        masks,
        lambda,
        partner: partner.to_vec(),
        cut: None,
    })
}

/// Box of side `S * sqrt(1 - lambda)` at a uniform center, clipped to the image.
pub fn sample_cut_box<R: Rng>(h: usize, w: usize, lambda: f64, rng: &mut R) -> CutBox {
    let ratio = (1.0 - lambda).clamp(0.0, 1.0).sqrt();
    let (bh, bw) = (h as f64 * ratio, w as f64 * ratio);
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let y0 = (cy - bh / 2.0).round().clamp(0.0, h as f64) as usize;
    let y1 = (cy + bh / 2.0).round().clamp(0.0, h as f64) as usize;
    let x0 = (cx - bw / 2.0).round().clamp(0.0, w as f64) as usize;
    let x1 = (cx + bw / 2.0).round().clamp(0.0, w as f64) as usize;
    CutBox {
        y0,
        x0,
        h: y1 - y0,
        w: x1 - x0,
    }
}

/// CutMix with `lambda ~ Beta(alpha, alpha)`; labels use the area-adjusted lambda.
pub fn cutmix<R: Rng>(batch: &Batch, alpha: f64, rng: &mut R) -> Result<MixedBatch> {
    check(batch, alpha)?;
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::invalid(e.to_string()))?
        .sample(rng);
    let cut = sample_cut_box(batch.h, batch.w, lambda, rng);
    let partner = shuffled(batch.n, rng);
    cutmix_with(batch, cut, &partner)
}

/// Pastes `cut` from each partner; label weights are the exact kept/pasted area fractions.
pub fn cutmix_with(batch: &Batch, cut: CutBox, partner: &[usize]) -> Result<MixedBatch> {
    if batch.n < 2 {
        return Err(Error::invalid(format!("mixing needs a batch of at least 2, got {}", batch.n)));
    }
    check_partner(batch, partner)?;
    if cut.y0 + cut.h > batch.h || cut.x0 + cut.w > batch.w {
        return Err(Error::Shape(format!("cut box {cut:?} exceeds {}x{}", batch.h, batch.w)));
    }
    let total = (batch.h * batch.w) as f64;
    let pasted = cut.area() as f64 / total;
    let kept = (batch.h * batch.w - cut.area()) as f64 / total;
    let len = batch.image_len();
    let plane = batch.h * batch.w;

    let mut images = batch.images.clone();
    for (i, &j) in partner.iter().enumerate() {
        for c in 0..batch.c {
            for y in cut.y0..cut.y0 + cut.h {
                let row = c * plane + y * batch.w;
                let dst = i * len + row + cut.x0;
                let src = j * len + row + cut.x0;
                images[dst..dst + cut.w].copy_from_slice(&batch.images[src..src + cut.w]);
            }
        }
    }
    let mut labels = Vec::with_capacity(batch.labels.len());
    for (i, &j) in partner.iter().enumerate() {
        let la = &batch.labels[i * batch.k..(i + 1) * batch.k];
        let lb = &batch.labels[j * batch.k..(j + 1) * batch.k];
        labels.extend(la.iter().zip(lb).map(|(&x, &y)| (kept * x as f64 + pasted * y as f64) as f32));
    }
    let masks = batch.masks.as_ref().map(|m| {
        let mut out = m.clone();
        for (i, &j) in partner.iter().enumerate() {
            for y in cut.y0..cut.y0 + cut.h {
                let dst = i * plane + y * batch.w + cut.x0;
                let src = j * plane + y * batch.w + cut.x0;
                out[dst..dst + cut.w].copy_from_slice(&m[src..src + cut.w]);
            }
        }
        out
    });
    Ok(MixedBatch {
        images,
        labels,
        masks,
        lambda: kept,
        partner: partner.to_vec(),
        cut: Some(cut),
    })
}
