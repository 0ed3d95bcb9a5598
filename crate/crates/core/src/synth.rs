//! Synthetic cystoscopy-like corpora: pinkish textured mucosa with an optional
//! darker elliptical lesion. Lesion color and texture carry the marker signal
//! for subtyping. Everything is a pure function of the seed.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::rng_for;
use crate::dataio::{
    polygon_to_mask, BinaryMask, DatasetManifest, ImageRecord, ManifestEntry, PolygonAnnotation,
};
use crate::nn::Task;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub images: usize,
    pub patients: usize,
    pub side: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(task: Task, images: usize, side: usize, seed: u64) -> Self {
        Self { task, images, patients: images.div_ceil(2).max(1), side, seed }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub record: ImageRecord,
    pub tumor: u8,
    pub lesion: Option<PolygonAnnotation>,
    pub mask: BinaryMask,
    /// HER-2, Ki-67, p53; `None` = unknown.
    pub markers: [Option<u8>; 3],
    /// (y0, x0, y1, x1) inclusive bounds of the lesion, if any.
    pub bbox: Option<(usize, usize, usize, usize)>,
}

const POLY_VERTICES: usize = 32;

fn ellipse_polygon<R: Rng>(rng: &mut R, side: usize) -> PolygonAnnotation {
    let s = side as f64;
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let ry = rng.random_range(0.12 * s..0.22 * s);
    let rx = rng.random_range(0.12 * s..0.22 * s);
    let rot = rng.random_range(0.0..std::f64::consts::PI);
    let (sn, cs) = rot.sin_cos();
    let points = (0..POLY_VERTICES)
        .map(|i| {
            let t = i as f64 / POLY_VERTICES as f64 * std::f64::consts::TAU;
            let (u, v) = (rx * t.cos(), ry * t.sin());
            let x = cx + u * cs - v * sn;
            let y = cy + u * sn + v * cs;
            // Quantize so the annotation file round-trips exactly.
            ((x * 100.0).round() / 100.0, (y * 100.0).round() / 100.0)
        })
        .collect();
    PolygonAnnotation::new(points, "tumor")
}

fn render<R: Rng>(rng: &mut R, side: usize, mask: &BinaryMask, markers: [Option<u8>; 3]) -> RgbImage {
    let s = side as f32;
    let base = [
        0.80 + rng.random_range(-0.05..0.05f32),
        0.52 + rng.random_range(-0.05..0.05f32),
        0.47 + rng.random_range(-0.05..0.05f32),
    ];
    let (gy, gx) = (rng.random_range(-0.12..0.12f32), rng.random_range(-0.12..0.12f32));
    // Thin darker vessels as sinusoids.
    let vessels: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(2.0..6.0) * s / 64.0,
                rng.random_range(0.05..0.2) * std::f32::consts::TAU * 64.0 / s,
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let her2 = markers[0] == Some(1);
    let ki67 = markers[1] == Some(1);
    let p53 = markers[2] == Some(1);
    let lesion = [
        0.55 + rng.random_range(-0.05..0.05f32),
        0.22 + rng.random_range(-0.04..0.04f32),
        if her2 { 0.45 } else { 0.25 } + rng.random_range(-0.04..0.04f32),
    ];
    let lesion_gain = if p53 { 0.85 } else { 1.0 };
    let mut img = RgbImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f32 / s - 0.5, x as f32 / s - 0.5);
            let shade = 1.0 + gy * fy + gx * fx;
            let mut px = base.map(|c| c * shade);
            for &(offset, width, freq, phase) in &vessels {
                let center = offset + (s / 10.0) * (freq * x as f32 + phase).sin();
                let d = (y as f32 - center).abs();
                if d < width / 2.0 {
                    px[1] *= 0.8;
                    px[2] *= 0.85;
                }
            }
            if mask.get(y, x) {
                px = lesion.map(|c| c * lesion_gain);
                if ki67 && (x / 2 + y / 2) % 2 == 0 {
                    px = px.map(|c| c * 0.75);
                }
            }
            let noise: f32 = rng.random_range(-0.04..0.04);
            let rgb = px.map(|c| ((c + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }
    img
}

fn bbox(mask: &BinaryMask) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                b = Some(match b {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
    }
    b
}

/// Generates `spec.images` samples. Classification corpora alternate
/// lesion / no lesion; segmentation and subtyping corpora always have one.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    if spec.side < 64 {
        return Err(Error::invalid("synthetic images must be at least 64 pixels"));
    }
    if spec.images == 0 || spec.patients == 0 || spec.patients > spec.images {
        return Err(Error::invalid("need 1 <= patients <= images"));
    }
    (0..spec.images)
        .map(|i| {
            let mut rng = rng_for(spec.seed, i as u64);
            let tumor = match spec.task {
                Task::Classify => (i % 2) as u8,
                _ => 1,
            };
            let markers = if spec.task == Task::Subtype {
                let mut m = [None; 3];
                for v in &mut m {
                    *v = if rng.random_bool(0.1) { None } else { Some(rng.random_bool(0.5) as u8) };
                }
                if m.iter().all(Option::is_none) {
                    m[0] = Some(rng.random_bool(0.5) as u8);
                }
                m
            } else {
                [None; 3]
            };
            let lesion = (tumor == 1).then(|| ellipse_polygon(&mut rng, spec.side));
            let mask = polygon_to_mask(lesion.as_slice(), spec.side, spec.side);
            let pixels = render(&mut rng, spec.side, &mask, markers);
            let patient = i * spec.patients / spec.images;
            let record = ImageRecord::new(format!("img_{i:04}"), format!("pt_{patient:03}"), pixels, "synthetic")?;
            Ok(SynthSample { record, tumor, bbox: bbox(&mask), lesion, mask, markers })
        })
        .collect()
}

/// Writes images, masks, LabelMe annotations and `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, task: Task, samples: &[SynthSample]) -> Result<DatasetManifest> {
    for sub in ["images", "masks", "annotations"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let id = &s.record.id;
        let rel = format!("images/{id}.png");
        let path = dir.join(&rel);
        s.record.pixels.save(&path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let mut e = ManifestEntry::new(id.clone(), s.record.patient_id.clone(), rel);
        match task {
            Task::Classify => e.tumor_label = Some(s.tumor),
            Task::Segment => {
                e.tumor_label = Some(1);
                let mrel = format!("masks/{id}.png");
                s.mask.save_png(&dir.join(&mrel))?;
                e.mask_path = Some(mrel.into());
            }
            Task::Subtype => {
                e.tumor_label = Some(1);
                [e.her2, e.ki67, e.p53] = s.markers;
            }
        }
        if let Some(poly) = &s.lesion {
            let shapes = serde_json::json!({
                "shapes": [{
                    "label": poly.label,
                    "points": poly.points.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>(),
                    "shape_type": "polygon",
                }],
                "imagePath": format!("../images/{id}.png"),
                "imageHeight": s.record.height(),
                "imageWidth": s.record.width(),
            });
            let apath = dir.join(format!("annotations/{id}.json"));
            std::fs::write(&apath, serde_json::to_string_pretty(&shapes)?).map_err(|e| Error::io(&apath, e))?;
        }
        entries.push(e);
    }
    let m = DatasetManifest::new(entries, dir)?;
    m.save(&dir.join("manifest.json"))?;
    Ok(m)
}
