use std::path::Path;

use image::RgbImage;

use crate::{Error, Result};

/// Reference channel statistics of the large natural-image corpus the
/// pretrained backbones were fitted on.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const MIN_IMAGE_SIDE: u32 = 64;

/// A raw 8-bit RGB image with its patient linkage.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    pub patient_id: String,
    pub pixels: RgbImage,
    pub source: String,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        patient_id: impl Into<String>,
        pixels: RgbImage,
        source: impl Into<String>,
    ) -> Result<Self> {
        let (w, h) = pixels.dimensions();
        let id = id.into();
        if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
            return Err(Error::validation(format!(
                "image '{id}' is {w}x{h}, minimum side is {MIN_IMAGE_SIDE}"
            )));
        }
        Ok(Self {
            id,
            patient_id: patient_id.into(),
            pixels,
            source: source.into(),
        })
    }

    /// Builds a record from interleaved raw bytes; only 3-channel data is accepted.
    pub fn from_raw(
        id: impl Into<String>,
        patient_id: impl Into<String>,
        width: u32,
        height: u32,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {channels}")));
        }
        let pixels = RgbImage::from_raw(width, height, data)
            .ok_or_else(|| Error::Shape(format!("buffer does not hold {width}x{height}x3 bytes")))?;
        Self::new(id, patient_id, pixels, "raw")
    }

    pub fn load(id: impl Into<String>, patient_id: impl Into<String>, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let pixels = decode_image(&bytes)?;
        Self::new(id, patient_id, pixels, path.display().to_string())
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

/// Decodes JPEG/PNG/BMP bytes into 8-bit RGB.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)?;
    Ok(img.to_rgb8())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalization {
    /// Fixed reference statistics ([`IMAGENET_MEAN`], [`IMAGENET_STD`]).
    Reference,
    /// Statistics of the image itself.
    PerImage { mean: [f32; 3], std: [f32; 3] },
}

impl Normalization {
    fn stats(&self) -> ([f32; 3], [f32; 3]) {
        match *self {
            Normalization::Reference => (IMAGENET_MEAN, IMAGENET_STD),
            Normalization::PerImage { mean, std } => (mean, std),
        }
    }
}

/// Planar 3xHxW standardized image, ready for a network.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub norm: Normalization,
}

impl FloatImage {
    pub fn new(data: Vec<f32>, height: usize, width: usize, norm: Normalization) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "float image has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            height,
            width,
            norm,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Bilinear resize of planar data with half-pixel centers and clamped borders.
pub fn resize_bilinear(
    src: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    if out_h == height && out_w == width {
        return src.to_vec();
    }
    let taps = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f64 / dst_len as f64;
        (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, height);
    let xs = taps(out_w, width);
    let mut out = vec![0.0; channels * out_h * out_w];
    for c in 0..channels {
        let plane = &src[c * height * width..(c + 1) * height * width];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * width + x0] * (1.0 - fx) + plane[y0 * width + x1] * fx;
                let bot = plane[y1 * width + x0] * (1.0 - fx) + plane[y1 * width + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn planar_unit(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let n = (w * h) as usize;
    let mut out = vec![0.0; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

/// Resizes to `side`x`side` and standardizes with the reference statistics.
pub fn preprocess(rec: &ImageRecord, side: usize) -> Result<FloatImage> {
    preprocess_with(rec, side, false)
}

/// `per_image = true` standardizes with the image's own channel statistics instead.
pub fn preprocess_with(rec: &ImageRecord, side: usize, per_image: bool) -> Result<FloatImage> {
    let unit = planar_unit(&rec.pixels);
    preprocess_float(
        &unit,
        rec.height() as usize,
        rec.width() as usize,
        side,
        per_image,
    )
}

/// Same pipeline on planar pixel data already scaled to `[0, 1]`.
pub fn preprocess_float(
    unit: &[f32],
    height: usize,
    width: usize,
    side: usize,
    per_image: bool,
) -> Result<FloatImage> {
    if unit.len() != 3 * height * width {
        return Err(Error::Shape(format!(
            "expected 3x{height}x{width} planar pixels, got {} values",
            unit.len()
        )));
    }
    if side == 0 {
        return Err(Error::invalid("input side must be positive"));
    }
    let mut data = resize_bilinear(unit, 3, height, width, side, side);
    let n = side * side;
    let norm = if per_image {
        let mut mean = [0.0f32; 3];
        let mut std = [0.0f32; 3];
        for c in 0..3 {
            let ch = &data[c * n..(c + 1) * n];
            let m = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = ch.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            mean[c] = m as f32;
            std[c] = (var.sqrt() as f32).max(1e-6);
        }
        Normalization::PerImage { mean, std }
    } else {
        Normalization::Reference
    };
    let (mean, std) = norm.stats();
    for c in 0..3 {
        for v in &mut data[c * n..(c + 1) * n] {
            *v = (*v - mean[c]) / std[c];
        }
    }
    let img = FloatImage::new(data, side, side, norm)?;
    if !img.is_finite() {
        return Err(Error::validation("preprocessed image contains non-finite values"));
    }
    Ok(img)
}

/// Inverts standardization, returning planar pixel values in `[0, 1]` space.
pub fn denormalize(img: &FloatImage) -> Vec<f32> {
    let (mean, std) = img.norm.stats();
    let n = img.height * img.width;
    let mut out = img.data.clone();
    for c in 0..3 {
        for v in &mut out[c * n..(c + 1) * n] {
            *v = *v * std[c] + mean[c];
        }
    }
    out
}

/// Standardizes planar `[0, 1]` data with given statistics; inverse of [`denormalize`].
pub fn renormalize(unit: &[f32], height: usize, width: usize, norm: Normalization) -> Result<FloatImage> {
    let (mean, std) = norm.stats();
    let n = height * width;
    let mut data = unit.to_vec();
    for c in 0..3 {
        for v in &mut data[c * n..(c + 1) * n] {
            *v = (*v - mean[c]) / std[c];
        }
    }
    FloatImage::new(data, height, width, norm)
}

/// Planar `[0,1]` float data back to an 8-bit image (values clamped, rounded).
pub fn unit_to_rgb(unit: &[f32], height: usize, width: usize) -> RgbImage {
    let n = height * width;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        let px = |c: usize| (unit[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent reference: per-pixel bilinear sample with explicit clamping.
    fn reference_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let sample = |y: f64, x: f64| -> f64 {
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let at = |yy: usize, xx: usize| src[yy * w + xx];
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
        };
        let mut out = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                out.push(sample(sy, sx));
            }
        }
        out
    }

    fn checkerboard(side: u32) -> ImageRecord {
        let img = RgbImage::from_fn(side, side, |x, y| {
            if (x + y) % 2 == 0 {
                image::Rgb([255, 200, 10])
            } else {
                image::Rgb([0, 40, 120])
            }
        });
        ImageRecord::new("cb", "p", img, "test").unwrap()
    }

    #[test]
    fn reference_mean_image_maps_to_zero() {
        let n = 64 * 64;
        let mut unit = vec![0.0f32; 3 * n];
        for c in 0..3 {
            unit[c * n..(c + 1) * n].fill(IMAGENET_MEAN[c]);
        }
        let out = preprocess_float(&unit, 64, 64, 64, false).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_u8_mean_image_maps_close_to_zero() {
        let px = IMAGENET_MEAN.map(|m| (m * 255.0).round() as u8);
        let rec = ImageRecord::new("m", "p", RgbImage::from_pixel(64, 64, image::Rgb(px)), "t").unwrap();
        let out = preprocess(&rec, 64).unwrap();
        for c in 0..3 {
            let bound = 0.5 / 255.0 / IMAGENET_STD[c] + 1e-6;
            assert!(out.channel(c).iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn same_size_is_not_resampled() {
        let rec = checkerboard(64);
        let out = preprocess(&rec, 64).unwrap();
        let n = 64 * 64;
        for (i, p) in rec.pixels.pixels().enumerate() {
            for c in 0..3 {
                let expect = (p.0[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
                assert_eq!(out.data[c * n + i], expect);
            }
        }
    }

    #[test]
    fn checkerboard_upsample_preserves_mean_and_matches_reference() {
        let rec = checkerboard(256);
        let out = preprocess(&rec, 512).unwrap();
        let unit = planar_unit(&rec.pixels);
        let n_in = 256 * 256;
        let n_out = 512 * 512;
        for c in 0..3 {
            let input_norm_mean = unit[c * n_in..(c + 1) * n_in]
                .iter()
                .map(|&v| ((v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]) as f64)
                .sum::<f64>()
                / n_in as f64;
            let out_mean = out.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n_out as f64;
            assert!((out_mean - input_norm_mean).abs() < 1e-3, "channel {c}");

            let src: Vec<f64> = unit[c * n_in..(c + 1) * n_in].iter().map(|&v| v as f64).collect();
            let reference = reference_bilinear(&src, 256, 256, 512, 512);
            for (r, o) in reference.iter().zip(out.channel(c)) {
                let o_unit = *o as f64 * IMAGENET_STD[c] as f64 + IMAGENET_MEAN[c] as f64;
                assert!((r - o_unit).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn downsample_matches_reference() {
        let src: Vec<f32> = (0..3 * 90 * 70).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let out = resize_bilinear(&src, 3, 90, 70, 64, 64);
        for c in 0..3 {
            let plane: Vec<f64> = src[c * 6300..(c + 1) * 6300].iter().map(|&v| v as f64).collect();
            let r = reference_bilinear(&plane, 90, 70, 64, 64);
            for (a, b) in r.iter().zip(&out[c * 4096..(c + 1) * 4096]) {
                assert!((a - *b as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn renormalizing_denormalized_output_is_idempotent() {
        for per_image in [false, true] {
            let rec = checkerboard(96);
            let first = preprocess_with(&rec, 64, per_image).unwrap();
            let again = preprocess_float(&denormalize(&first), 64, 64, 64, per_image).unwrap();
            for (a, b) in first.data.iter().zip(&again.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn non_rgb_raw_input_is_rejected() {
        let err = ImageRecord::from_raw("a", "p", 64, 64, 1, vec![0; 64 * 64]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn too_small_image_is_rejected() {
        assert!(ImageRecord::new("a", "p", RgbImage::new(32, 80), "t").is_err());
    }
}
