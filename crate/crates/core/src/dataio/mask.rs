use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pixel-wise lesion ground truth. Row-major, `true` = lesion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} pixels, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Thresholds a row-major probability map: pixel is set iff `p >= threshold`.
    pub fn from_probabilities(
        height: usize,
        width: usize,
        probs: &[f32],
        threshold: f32,
    ) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::Shape(format!(
                "probability map has {} values, expected {height}x{width}",
                probs.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: probs.iter().map(|&p| p >= threshold).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// Nearest-neighbour resize; masks are never interpolated.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Self::new(height, width);
        for y in 0..height {
            let sy = nearest_source(y, height, self.height);
            for x in 0..width {
                let sx = nearest_source(x, width, self.width);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Any non-zero pixel is foreground.
    pub fn from_gray_image(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.pixels().map(|p| p.0[0] > 0).collect(),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_gray_image(&img))
    }

    /// Single-channel PNG, 0/255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in &self.data {
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
        counts.push(run);
        Rle {
            height: self.height,
            width: self.width,
            counts,
        }
    }
}

fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}

/// Run-length encoding over row-major pixels. Runs alternate starting with
/// background, so the first count may be zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn decode(&self) -> Result<BinaryMask> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.height * self.width) as u64 {
            return Err(Error::Shape(format!(
                "rle covers {total} pixels, expected {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        let mut value = false;
        for &c in &self.counts {
            data.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        BinaryMask::from_vec(self.height, self.width, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    /// `(x, y)` in pixel coordinates; pixel `(row, col)` has its center at `(col, row)`.
    pub points: Vec<(f64, f64)>,
    pub label: String,
}

impl PolygonAnnotation {
    pub fn new(points: Vec<(f64, f64)>, label: impl Into<String>) -> Self {
        Self {
            points,
            label: label.into(),
        }
    }

    /// Clamps every vertex into `[0, width-1] x [0, height-1]`.
    pub fn clamped(&self, height: usize, width: usize) -> Self {
        let max_x = width.saturating_sub(1) as f64;
        let max_y = height.saturating_sub(1) as f64;
        Self {
            points: self
                .points
                .iter()
                .map(|&(x, y)| (x.clamp(0.0, max_x), y.clamp(0.0, max_y)))
                .collect(),
            label: self.label.clone(),
        }
    }
}

/// Signed shoelace area.
pub fn polygon_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = points[i];
        let (x1, y1) = points[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

const EDGE_EPS: f64 = 1e-9;

/// Rasterizes the union of `polys`. A pixel is set iff its center lies inside
/// (even-odd rule) or on the boundary of any polygon. Degenerate polygons are
/// skipped with a warning.
pub fn polygon_to_mask(polys: &[PolygonAnnotation], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    for poly in polys {
        if poly.points.len() < 3 || polygon_area(&poly.points).abs() <= f64::EPSILON {
            log::warn!(
                "skipping degenerate polygon '{}' ({} points)",
                poly.label,
                poly.points.len()
            );
            continue;
        }
        fill_interior(&mut mask, &poly.points);
        mark_boundary(&mut mask, &poly.points);
    }
    mask
}

fn edges(points: &[(f64, f64)]) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
    (0..points.len()).map(move |i| (points[i], points[(i + 1) % points.len()]))
}

fn fill_interior(mask: &mut BinaryMask, points: &[(f64, f64)]) {
    if mask.height == 0 || mask.width == 0 {
        return;
    }
    let (ymin, ymax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let y_start = ymin.ceil().max(0.0) as usize;
    let y_end = (ymax.floor() as i64).min(mask.height as i64 - 1);
    if y_end < y_start as i64 {
        return;
    }
    let mut xs = Vec::new();
    for y in y_start..=y_end as usize {
        let yf = y as f64;
        xs.clear();
        for ((x0, y0), (x1, y1)) in edges(points) {
            if y0 == y1 {
                continue;
            }
            // half-open in y so shared vertices are counted once
            if yf >= y0.min(y1) && yf < y0.max(y1) {
                xs.push(x0 + (yf - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let lo = pair[0].ceil().max(0.0);
            let hi = pair[1].floor().min(mask.width as f64 - 1.0);
            if hi < lo {
                continue;
            }
            for x in lo as usize..=hi as usize {
                mask.set(y, x, true);
            }
        }
    }
}

fn mark_boundary(mask: &mut BinaryMask, points: &[(f64, f64)]) {
    let h = mask.height as i64;
    let w = mask.width as i64;
    let mut set = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            mask.set(y as usize, x as usize, true);
        }
    };
    for ((x0, y0), (x1, y1)) in edges(points) {
        if y0 == y1 {
            if (y0 - y0.round()).abs() < EDGE_EPS {
                let lo = (x0.min(x1) - EDGE_EPS).ceil() as i64;
                let hi = (x0.max(x1) + EDGE_EPS).floor() as i64;
                for x in lo..=hi {
                    set(x, y0.round() as i64);
                }
            }
            continue;
        }
        let lo = (y0.min(y1) - EDGE_EPS).ceil() as i64;
        let hi = (y0.max(y1) + EDGE_EPS).floor() as i64;
        for y in lo..=hi {
            let x = x0 + (y as f64 - y0) * (x1 - x0) / (y1 - y0);
            if (x - x.round()).abs() < EDGE_EPS {
                set(x.round() as i64, y);
            }
        }
    }
}
