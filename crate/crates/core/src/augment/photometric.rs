use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::AugmentConfig;
use crate::dataio::{denormalize, renormalize, FloatImage};
use crate::Result;

/// Brightness/contrast jitter, Gaussian noise, then CLAHE, in pixel space.
/// The mask is never touched; a fully disabled config returns the input unchanged.
pub fn apply_photometric<R: Rng>(img: &FloatImage, cfg: &AugmentConfig, rng: &mut R) -> Result<FloatImage> {
    if !cfg.photometric_enabled() {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let mut unit = denormalize(img);

    if cfg.brightness > 0.0 || cfg.contrast > 0.0 {
        let b = if cfg.brightness > 0.0 {
            rng.random_range(-cfg.brightness..=cfg.brightness) as f32
        } else {
            0.0
        };
        let c = if cfg.contrast > 0.0 {
            rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) as f32
        } else {
            1.0
        };
        let mean = (unit.iter().map(|&v| v as f64).sum::<f64>() / unit.len() as f64) as f32;
        for v in &mut unit {
            *v = ((*v - mean) * c + mean + b).clamp(0.0, 1.0);
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma as f32).expect("sigma validated");
        for v in &mut unit {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }

    if cfg.clahe_clip > 0.0 {
        clahe_unit(&mut unit, h, w, cfg.clahe_clip, cfg.clahe_tiles);
    }

    renormalize(&unit, h, w, img.norm)
}

/// Contrast-limited adaptive histogram equalization on luminance, applied to
/// planar `[0,1]` RGB as an additive luminance shift. Tiles whose histogram
/// occupies a single bin map to themselves.
pub fn clahe_unit(unit: &mut [f32], h: usize, w: usize, clip: f64, tiles: usize) {
    let n = h * w;
    let tiles_y = tiles.min(h).max(1);
    let tiles_x = tiles.min(w).max(1);
    let luma: Vec<u8> = (0..n)
        .map(|i| {
            let y = 0.299 * unit[i] + 0.587 * unit[n + i] + 0.114 * unit[2 * n + i];
            (y.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();

    let bounds = |t: usize, count: usize, len: usize| (t * len / count, (t + 1) * len / count);
    let mut luts = vec![[0.0f32; 256]; tiles_y * tiles_x];
    for ty in 0..tiles_y {
        let (y0, y1) = bounds(ty, tiles_y, h);
        for tx in 0..tiles_x {
            let (x0, x1) = bounds(tx, tiles_x, w);
            let mut hist = [0.0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[luma[y * w + x] as usize] += 1.0;
                }
            }
            let lut = &mut luts[ty * tiles_x + tx];
            let occupied = hist.iter().filter(|&&c| c > 0.0).count();
            if occupied <= 1 {
                for (b, v) in lut.iter_mut().enumerate() {
                    *v = b as f32;
                }
                continue;
            }
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            let limit = (clip * area / 256.0).max(1.0);
            let mut excess = 0.0;
            for c in hist.iter_mut() {
                if *c > limit {
                    excess += *c - limit;
                    *c = limit;
                }
            }
            let share = excess / 256.0;
            let mut cdf = 0.0;
            for (b, c) in hist.iter().enumerate() {
                cdf += c + share;
                lut[b] = (cdf / area * 255.0) as f32;
            }
        }
    }

    // bilinear blend between the four surrounding tile centers
    let center = |t: usize, count: usize, len: usize| {
        let (a, b) = bounds(t, count, len);
        (a + b) as f32 / 2.0 - 0.5
    };
    let locate = |p: f32, count: usize, len: usize| -> (usize, usize, f32) {
        if count == 1 || p <= center(0, count, len) {
            return (0, 0, 0.0);
        }
        if p >= center(count - 1, count, len) {
            return (count - 1, count - 1, 0.0);
        }
        let mut t = 0;
        while center(t + 1, count, len) <= p {
            t += 1;
        }
        let (c0, c1) = (center(t, count, len), center(t + 1, count, len));
        (t, t + 1, (p - c0) / (c1 - c0))
    };
    for y in 0..h {
        let (ty0, ty1, fy) = locate(y as f32, tiles_y, h);
        for x in 0..w {
            let (tx0, tx1, fx) = locate(x as f32, tiles_x, w);
            let b = luma[y * w + x] as usize;
            let at = |ty: usize, tx: usize| luts[ty * tiles_x + tx][b];
            let mapped = (at(ty0, tx0) * (1.0 - fx) + at(ty0, tx1) * fx) * (1.0 - fy)
                + (at(ty1, tx0) * (1.0 - fx) + at(ty1, tx1) * fx) * fy;
            let shift = (mapped - b as f32) / 255.0;
            if shift != 0.0 {
                for c in 0..3 {
                    let v = &mut unit[c * n + y * w + x];
                    *v = (*v + shift).clamp(0.0, 1.0);
                }
            }
        }
    }
}
