use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::AugmentConfig;
use crate::dataio::{BinaryMask, FloatImage};
use crate::{Error, Result};

/// One sampled geometric transform, expressed as an output-to-source
/// coordinate map so image and mask share it exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricTransform {
    pub height: usize,
    pub width: usize,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Rotation about the image center in degrees; positive angles turn the
    /// content clockwise as displayed (rows grow downward).
    pub angle_deg: f64,
    /// Crop window `(y0, x0, h, w)` in source pixels, resized back to full size.
    pub crop: Option<(f64, f64, f64, f64)>,
    /// Per-pixel displacement `(dy, dx)` applied in output space.
    pub displacement: Option<(Vec<f32>, Vec<f32>)>,
}

impl GeometricTransform {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            flip_h: false,
            flip_v: false,
            angle_deg: 0.0,
            crop: None,
            displacement: None,
        }
    }

    pub fn sample<R: Rng>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let mut t = Self::identity(height, width);
        t.flip_h = rng.random_bool(cfg.flip_h_p);
        t.flip_v = rng.random_bool(cfg.flip_v_p);
        if cfg.rot_max_deg > 0.0 {
            t.angle_deg = rng.random_range(-cfg.rot_max_deg..=cfg.rot_max_deg);
        }
        let [lo, hi] = cfg.crop_scale;
        if lo < 1.0 {
            let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            if s < 1.0 {
                let (ch, cw) = (s * height as f64, s * width as f64);
                let y0 = rng.random_range(0.0..=(height as f64 - ch));
                let x0 = rng.random_range(0.0..=(width as f64 - cw));
                t.crop = Some((y0, x0, ch, cw));
            }
        }
        let mut field: Option<(Vec<f32>, Vec<f32>)> = None;
        let [alpha, sigma] = cfg.elastic;
        if alpha > 0.0 {
            field = Some(elastic_field(height, width, alpha, sigma, rng));
        }
        if cfg.grid_cells > 0 && cfg.grid_max_shift > 0.0 {
            let (gy, gx) = grid_field(height, width, cfg.grid_cells, cfg.grid_max_shift, rng);
            field = Some(match field {
                Some((ey, ex)) => (
                    ey.iter().zip(&gy).map(|(a, b)| a + b).collect(),
                    ex.iter().zip(&gx).map(|(a, b)| a + b).collect(),
                ),
                None => (gy, gx),
            });
        }
        t.displacement = field;
        t
    }

    /// Source coordinate `(y, x)` for output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (h, w) = (self.height as f64, self.width as f64);
        let (mut sy, mut sx) = (y as f64, x as f64);
        if let Some((dy, dx)) = &self.displacement {
            let i = y * self.width + x;
            sy += dy[i] as f64;
            sx += dx[i] as f64;
        }
        if let Some((y0, x0, ch, cw)) = self.crop {
            sy = y0 + (sy + 0.5) * ch / h - 0.5;
            sx = x0 + (sx + 0.5) * cw / w - 0.5;
        }
        if self.angle_deg != 0.0 {
            let (sin, cos) = exact_sin_cos(self.angle_deg);
            let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
            let (dy, dx) = (sy - cy, sx - cx);
            sy = cy + cos * dy - sin * dx;
            sx = cx + sin * dy + cos * dx;
        }
        if self.flip_h {
            sx = w - 1.0 - sx;
        }
        if self.flip_v {
            sy = h - 1.0 - sy;
        }
        (sy, sx)
    }

    pub fn apply_image(&self, img: &FloatImage) -> Result<FloatImage> {
        self.check(img.height, img.width)?;
        let (h, w) = (img.height, img.width);
        let n = h * w;
        let mut out = vec![0.0f32; 3 * n];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x);
                if !inside(sy, sx, h, w) {
                    continue;
                }
                let (y0, y1, fy) = taps(sy, h);
                let (x0, x1, fx) = taps(sx, w);
                for c in 0..3 {
                    let p = &img.data[c * n..(c + 1) * n];
                    let v = if fy == 0.0 && fx == 0.0 {
                        p[y0 * w + x0]
                    } else {
                        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                        let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bot * fy
                    };
                    out[c * n + y * w + x] = v;
                }
            }
        }
        FloatImage::new(out, h, w, img.norm)
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> Result<BinaryMask> {
        self.check(mask.height(), mask.width())?;
        let (h, w) = (mask.height(), mask.width());
        let mut out = BinaryMask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x);
                if inside(sy, sx, h, w) {
                    let (ry, rx) = (round_half_down(sy, h), round_half_down(sx, w));
                    out.set(y, x, mask.get(ry, rx));
                }
            }
        }
        Ok(out)
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h != self.height || w != self.width {
            return Err(Error::Shape(format!(
                "transform sampled for {}x{}, applied to {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn exact_sin_cos(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

fn inside(sy: f64, sx: f64, h: usize, w: usize) -> bool {
    sy >= -0.5 && sy < h as f64 - 0.5 && sx >= -0.5 && sx < w as f64 - 0.5
}

// nearest pixel for a coordinate already known to be inside [-0.5, len - 0.5)
fn round_half_down(s: f64, len: usize) -> usize {
    ((s + 0.5).floor().max(0.0) as usize).min(len - 1)
}

fn taps(s: f64, len: usize) -> (usize, usize, f32) {
    let s = s.clamp(0.0, (len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

fn gaussian_blur(field: &mut [f32], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0f32; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * field[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            field[y * w + x] = acc;
        }
    }
}

fn elastic_field<R: Rng>(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut R) -> (Vec<f32>, Vec<f32>) {
    let unit = Uniform::new_inclusive(-1.0f32, 1.0).expect("valid range");
    let mut dy: Vec<f32> = (0..h * w).map(|_| unit.sample(rng)).collect();
    let mut dx: Vec<f32> = (0..h * w).map(|_| unit.sample(rng)).collect();
    gaussian_blur(&mut dy, h, w, sigma);
    gaussian_blur(&mut dx, h, w, sigma);
    for v in dy.iter_mut().chain(dx.iter_mut()) {
        *v *= alpha as f32;
    }
    (dy, dx)
}

/// Random shifts at interior grid nodes (borders pinned), bilinearly interpolated.
fn grid_field<R: Rng>(h: usize, w: usize, cells: usize, max_shift: f64, rng: &mut R) -> (Vec<f32>, Vec<f32>) {
    let nodes = cells + 1;
    let (cell_h, cell_w) = (h as f64 / cells as f64, w as f64 / cells as f64);
    let mut ny = vec![0.0f64; nodes * nodes];
    let mut nx = vec![0.0f64; nodes * nodes];
    for i in 1..cells {
        for j in 1..cells {
            ny[i * nodes + j] = rng.random_range(-max_shift..=max_shift) * cell_h;
            nx[i * nodes + j] = rng.random_range(-max_shift..=max_shift) * cell_w;
        }
    }
    let mut dy = vec![0.0f32; h * w];
    let mut dx = vec![0.0f32; h * w];
    for y in 0..h {
        let gy = (y as f64 / cell_h).min(cells as f64 - 1e-9);
        let (i, fy) = (gy.floor() as usize, gy - gy.floor());
        for x in 0..w {
            let gx = (x as f64 / cell_w).min(cells as f64 - 1e-9);
            let (j, fx) = (gx.floor() as usize, gx - gx.floor());
            let lerp = |g: &[f64]| {
                let a = g[i * nodes + j] * (1.0 - fx) + g[i * nodes + j + 1] * fx;
                let b = g[(i + 1) * nodes + j] * (1.0 - fx) + g[(i + 1) * nodes + j + 1] * fx;
                (a * (1.0 - fy) + b * fy) as f32
            };
            dy[y * w + x] = lerp(&ny);
            dx[y * w + x] = lerp(&nx);
        }
    }
    (dy, dx)
}

/// Samples one transform and applies it to the image and, when given, its mask.
pub fn apply_geometric<R: Rng>(
    img: &FloatImage,
    mask: Option<&BinaryMask>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(FloatImage, Option<BinaryMask>)> {
    if let Some(m) = mask {
        if m.height() != img.height || m.width() != img.width {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {}x{}",
                m.height(),
                m.width(),
                img.height,
                img.width
            )));
        }
    }
    let t = GeometricTransform::sample(cfg, img.height, img.width, rng);
    let out = t.apply_image(img)?;
    let out_mask = mask.map(|m| t.apply_mask(m)).transpose()?;
    Ok((out, out_mask))
}

/// Mask-only counterpart of [`apply_geometric`]; consumes the generator identically.
pub fn apply_geometric_mask<R: Rng>(mask: &BinaryMask, cfg: &AugmentConfig, rng: &mut R) -> Result<BinaryMask> {
    GeometricTransform::sample(cfg, mask.height(), mask.width(), rng).apply_mask(mask)
}
