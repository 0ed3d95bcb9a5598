//! Training-time augmentation. Geometric transforms are sampled once and
//! applied identically to an image (bilinear) and its mask (nearest);
//! photometric transforms touch the image only; MixUp/CutMix mix whole batches.

mod geometric;
mod mix;
mod photometric;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use geometric::{apply_geometric, apply_geometric_mask, GeometricTransform};
pub use mix::{
    cutmix, cutmix_with, mixup, mixup_with, sample_cut_box, Batch, CutBox, MixedBatch,
    DEFAULT_CUTMIX_ALPHA, DEFAULT_MIXUP_ALPHA,
};
pub use photometric::{apply_photometric, clahe_unit};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_h_p: f64,
    pub flip_v_p: f64,
    pub rot_max_deg: f64,
    /// Crop side as a fraction of the image side, sampled uniformly in `[min, max]`.
    pub crop_scale: [f64; 2],
    /// Additive brightness offset range, pixel units.
    pub brightness: f64,
    /// Multiplicative contrast range around 1.
    pub contrast: f64,
    /// Gaussian noise std in `[0, 1]` pixel units.
    pub noise_sigma: f64,
    /// Elastic deformation `(alpha, sigma)` in pixels; alpha 0 disables.
    pub elastic: [f64; 2],
    /// Grid distortion cells per side; 0 disables.
    pub grid_cells: usize,
    /// Grid node displacement as a fraction of the cell size.
    pub grid_max_shift: f64,
    /// CLAHE clip limit; 0 disables.
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_h_p: 0.0,
            flip_v_p: 0.0,
            rot_max_deg: 0.0,
            crop_scale: [1.0, 1.0],
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
            elastic: [0.0, 4.0],
            grid_cells: 0,
            grid_max_shift: 0.0,
            clahe_clip: 0.0,
            clahe_tiles: 8,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Flips, rotation, cropping, color jitter and noise.
    pub fn classification() -> Self {
        Self {
            flip_h_p: 0.5,
            flip_v_p: 0.5,
            rot_max_deg: 15.0,
            crop_scale: [0.85, 1.0],
            brightness: 0.1,
            contrast: 0.1,
            noise_sigma: 0.02,
            ..Self::default()
        }
    }

    pub fn segmentation() -> Self {
        Self {
            elastic: [8.0, 4.0],
            ..Self::classification()
        }
    }

    /// Grid distortion, elastic deformation and adaptive histogram equalization on top of flips.
    pub fn subtyping() -> Self {
        Self {
            flip_h_p: 0.5,
            flip_v_p: 0.5,
            elastic: [8.0, 4.0],
            grid_cells: 4,
            grid_max_shift: 0.2,
            clahe_clip: 2.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_h_p", self.flip_h_p), ("flip_v_p", self.flip_v_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale must satisfy 0 < min <= max <= 1, got {:?}",
                self.crop_scale
            )));
        }
        for (name, v) in [
            ("rot_max_deg", self.rot_max_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("noise_sigma", self.noise_sigma),
            ("elastic.alpha", self.elastic[0]),
            ("grid_max_shift", self.grid_max_shift),
            ("clahe_clip", self.clahe_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.noise_sigma > 1.0 {
            return Err(Error::Config("noise_sigma must lie in [0, 1]".into()));
        }
        if self.elastic[0] > 0.0 && !(self.elastic[1] > 0.0) {
            return Err(Error::Config("elastic sigma must be > 0".into()));
        }
        if self.clahe_clip > 0.0 && self.clahe_tiles == 0 {
            return Err(Error::Config("clahe_tiles must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn photometric_enabled(&self) -> bool {
        self.brightness > 0.0 || self.contrast > 0.0 || self.noise_sigma > 0.0 || self.clahe_clip > 0.0
    }
}

/// Per-sample generator: one independent stream per `(seed, index)`.
pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
