//! Grad-CAM saliency and overlay rendering.

use std::path::Path;

use candle_core::{DType, IndexOp, Tensor};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataio::{resize_bilinear, BinaryMask, FloatImage};
use crate::nn::{Ctx, Model, Task};
use crate::train::fit::MARKER_NAMES;
use crate::{Error, Result};

/// Smallest stage side Grad-CAM accepts.
pub const MIN_CAM_SIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Row-major `side * side` values in [0, 1].
    pub grid: Vec<f32>,
    pub side: usize,
    pub target: String,
    pub layer: String,
    /// True when the class activation was zero everywhere.
    pub all_zero: bool,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.grid[y * self.side + x]
    }

    /// Fraction of the total saliency mass inside the half-open box
    /// `(y0, x0, y1, x1)`.
    pub fn mass_inside(&self, (y0, x0, y1, x1): (usize, usize, usize, usize)) -> f64 {
        let total: f64 = self.grid.iter().map(|&v| v as f64).sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in y0..y1.min(self.side) {
            for x in x0..x1.min(self.side) {
                inside += self.get(y, x) as f64;
            }
        }
        inside / total
    }

    pub fn to_luma16(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        let px: Vec<u16> = self.grid.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        ImageBuffer::from_raw(self.side as u32, self.side as u32, px).expect("grid matches side")
    }

    /// Single-channel 16-bit PNG, 0..=65535 spanning [0, 1].
    pub fn png16_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_luma16().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.png16_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Output names a task's logits correspond to.
pub fn target_names(task: Task) -> Vec<&'static str> {
    match task {
        Task::Classify => vec!["tumor"],
        Task::Subtype => MARKER_NAMES.to_vec(),
        Task::Segment => vec!["lesion"],
    }
}

/// Deepest backbone stage whose side is at least [`MIN_CAM_SIDE`] for a
/// square input of `side`.
pub fn default_layer(model: &Model, side: usize) -> Result<String> {
    model
        .stage_sides(side)
        .into_iter()
        .rev()
        .find(|(_, s)| *s >= MIN_CAM_SIDE)
        .map(|(n, _)| n)
        .ok_or_else(|| Error::invalid(format!("no stage reaches {MIN_CAM_SIDE}x{MIN_CAM_SIDE} at input side {side}")))
}

/// Gradient-weighted class activation map of output `target` at stage
/// `layer` (the default layer when `None`). For segmentation the target is
/// the mean lesion logit.
pub fn grad_cam(model: &Model, img: &FloatImage, target: usize, layer: Option<&str>) -> Result<SaliencyMap> {
    let names = target_names(model.task());
    let target_name = *names
        .get(target)
        .ok_or_else(|| Error::invalid(format!("target index {target} out of range for {} (valid: 0..{})", model.task(), names.len())))?;
    let layer = match layer {
        Some(l) => l.to_string(),
        None => default_layer(model, img.height)?,
    };
    let valid = model.stage_names();
    if !valid.contains(&layer) {
        return Err(Error::invalid(format!("unknown layer '{layer}'; valid stages: {}", valid.join(", "))));
    }

    let x = Tensor::from_vec(img.data.clone(), (1, 3, img.height, img.width), model.device())?;
    let ctx = Ctx::with_tap(&layer);
    let z = model.forward(&x, &ctx)?;
    let logit = match model.task() {
        Task::Segment => z.mean_all()?,
        _ => z.i((0, target))?,
    };
    let act = ctx.tapped().ok_or_else(|| Error::invalid(format!("layer '{layer}' is not on this model's forward path")))?;
    let (_, c, h, w) = act.as_tensor().dims4()?;
    if h < MIN_CAM_SIDE || w < MIN_CAM_SIDE {
        return Err(Error::invalid(format!(
            "layer '{layer}' is {h}x{w}; Grad-CAM needs at least {MIN_CAM_SIDE}x{MIN_CAM_SIDE}"
        )));
    }
    let grads = logit.backward()?;
    let a = act.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let g = match grads.get(act.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; a.len()],
    };
    let hw = h * w;
    let mut cam = vec![0f64; hw];
    for k in 0..c {
        let gk = &g[k * hw..(k + 1) * hw];
        let weight = gk.iter().sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        for (o, &v) in cam.iter_mut().zip(&a[k * hw..(k + 1) * hw]) {
            *o += weight * v;
        }
    }
    let cam: Vec<f32> = cam.into_iter().map(|v| v.max(0.0) as f32).collect();
    let mut grid = resize_bilinear(&cam, 1, h, w, img.height, img.width);
    let max = grid.iter().cloned().fold(0f32, f32::max);
    let all_zero = !(max > 0.0);
    if all_zero {
        grid.iter_mut().for_each(|v| *v = 0.0);
    } else {
        grid.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(SaliencyMap { grid, side: img.height, target: target_name.to_string(), layer, all_zero })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
    Red,
}

impl Colormap {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "jet" => Ok(Colormap::Jet),
            "gray" | "grey" => Ok(Colormap::Gray),
            "red" => Ok(Colormap::Red),
            _ => Err(Error::invalid(format!("unknown colormap '{s}' (expected jet, gray or red)"))),
        }
    }

    /// RGB in [0, 1] for a value in [0, 1].
    pub fn map(self, v: f32) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Gray => [v, v, v],
            Colormap::Red => [v, 0.0, 0.0],
            Colormap::Jet => {
                let f = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
                [f(3.0), f(2.0), f(1.0)]
            }
        }
    }
}

pub enum Layer<'a> {
    Saliency(&'a SaliencyMap),
    Mask(&'a BinaryMask),
}

impl Layer<'_> {
    /// Layer values resampled to `h`x`w`.
    fn values(&self, h: usize, w: usize) -> Vec<f32> {
        match self {
            Layer::Saliency(s) => resize_bilinear(&s.grid, 1, s.side, s.side, h, w),
            Layer::Mask(m) => m.resize_nearest(h, w).as_f32(),
        }
    }
}

/// `(1 - alpha) * img + alpha * colormap(layer)`, at the image's resolution.
/// Out-of-range alpha is clamped with a warning.
pub fn overlay(img: &RgbImage, layer: Layer<'_>, alpha: f64, cmap: Colormap) -> RgbImage {
    let a = if (0.0..=1.0).contains(&alpha) {
        alpha
    } else {
        log::warn!("overlay alpha {alpha} outside [0, 1], clamping");
        if alpha.is_nan() { 0.0 } else { alpha.clamp(0.0, 1.0) }
    };
    let (w, h) = img.dimensions();
    let vals = layer.values(h as usize, w as usize);
    let mut out = img.clone();
    if a == 0.0 {
        return out;
    }
    for (i, p) in out.pixels_mut().enumerate() {
        let c = cmap.map(vals[i]);
        let mut q = [0u8; 3];
        for k in 0..3 {
            let v = (1.0 - a) * p.0[k] as f64 + a * (c[k] as f64 * 255.0);
            q[k] = v.round().clamp(0.0, 255.0) as u8;
        }
        *p = Rgb(q);
    }
    out
}

/// PNG bytes of an RGB image.
pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}
