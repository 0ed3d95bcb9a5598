use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::augment::{apply_geometric, apply_photometric, rng_for, AugmentConfig};
use crate::dataio::{preprocess_with, BinaryMask, DatasetManifest, FloatImage, ImageRecord, Marker};
use crate::nn::Task;
use crate::synth::SynthSample;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Binary(f32),
    Mask(BinaryMask),
    /// HER-2, Ki-67, p53.
    Markers([Option<f32>; 3]),
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub record: Arc<ImageRecord>,
    pub target: Target,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.record.id
    }

    pub fn patient_id(&self) -> &str {
        &self.record.patient_id
    }
}

/// In-memory task dataset; images are preprocessed on access.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: Task,
    pub side: usize,
    pub per_image_norm: bool,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(task: Task, side: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            let ok = matches!(
                (&s.target, task),
                (Target::Binary(_), Task::Classify) | (Target::Mask(_), Task::Segment) | (Target::Markers(_), Task::Subtype)
            );
            if !ok {
                return Err(Error::validation(format!("sample {} has a target for another task", s.id())));
            }
        }
        Ok(Self { task, side, per_image_norm: false, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { samples: idx.iter().map(|&i| self.samples[i].clone()).collect(), ..self.clone() }
    }

    /// Loads the images a task can use: labeled images for classification,
    /// masked images for segmentation, images with a known marker for
    /// subtyping.
    pub fn from_manifest(m: &DatasetManifest, task: Task, side: usize) -> Result<Self> {
        let mut samples = Vec::new();
        for e in &m.entries {
            let target = match task {
                Task::Classify => match e.tumor_label {
                    Some(l) => Target::Binary(l as f32),
                    None => continue,
                },
                Task::Segment => match m.mask_path(e) {
                    Some(p) => Target::Mask(BinaryMask::load_png(&p)?),
                    None => continue,
                },
                Task::Subtype => {
                    let s = e.subtype();
                    if !s.any_known() {
                        continue;
                    }
                    Target::Markers(s.as_array().map(Marker::value))
                }
            };
            let record = ImageRecord::load(e.id.clone(), e.patient_id.clone(), &m.image_path(e))?;
            if let Target::Mask(mask) = &target {
                if mask.height() != record.height() as usize || mask.width() != record.width() as usize {
                    return Err(Error::validation(format!("mask of {} does not match its image size", e.id)));
                }
            }
            samples.push(Sample { record: Arc::new(record), target });
        }
        if samples.is_empty() {
            return Err(Error::validation(format!("manifest has no usable records for task {task}")));
        }
        Self::new(task, side, samples)
    }

    pub fn from_synth(task: Task, side: usize, samples: &[SynthSample]) -> Result<Self> {
        let samples = samples
            .iter()
            .map(|s| Sample {
                record: Arc::new(s.record.clone()),
                target: match task {
                    Task::Classify => Target::Binary(s.tumor as f32),
                    Task::Segment => Target::Mask(s.mask.clone()),
                    Task::Subtype => Target::Markers(s.markers.map(|m| m.map(|v| v as f32))),
                },
            })
            .collect();
        Self::new(task, side, samples)
    }

    /// Replaces binary labels with a seeded permutation of themselves.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut targets: Vec<Target> = self.samples.iter().map(|s| s.target.clone()).collect();
        targets.shuffle(&mut rng_for(seed, u64::MAX));
        let samples = self
            .samples
            .iter()
            .zip(targets)
            .map(|(s, target)| Sample { record: s.record.clone(), target })
            .collect();
        Self { samples, ..self.clone() }
    }

    pub fn patients(&self) -> Vec<String> {
        let mut p: Vec<String> = self.samples.iter().map(|s| s.patient_id().to_string()).collect();
        p.sort();
        p.dedup();
        p
    }

    /// Preprocessed image and mask (resized to the model side) of sample `i`.
    pub fn load(&self, i: usize) -> Result<(FloatImage, Option<BinaryMask>)> {
        let s = &self.samples[i];
        let img = preprocess_with(&s.record, self.side, self.per_image_norm)?;
        let mask = match &s.target {
            Target::Mask(m) => Some(m.resize_nearest(self.side, self.side)),
            _ => None,
        };
        Ok((img, mask))
    }
}

/// One assembled mini-batch.
#[derive(Clone, Debug)]
pub struct BatchData {
    pub ids: Vec<String>,
    /// (b, 3, s, s) f32
    pub images: Vec<f32>,
    /// (b, k) soft labels for classification and subtyping.
    pub labels: Vec<f32>,
    /// (b, s, s) soft masks for segmentation.
    pub masks: Option<Vec<f32>>,
    /// Known-label indicator for subtyping, same layout as `labels`.
    pub known: Option<Vec<bool>>,
    pub n: usize,
    pub side: usize,
}

impl BatchData {
    pub fn k(&self) -> usize {
        self.labels.len() / self.n.max(1)
    }

    pub fn image_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.images, (self.n, 3, self.side, self.side), device)?.to_dtype(dtype)?)
    }

    pub fn label_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.labels, (self.n, self.k()), device)?.to_dtype(dtype)?)
    }

    pub fn mask_tensor(&self, dtype: DType, device: &Device) -> Result<Option<Tensor>> {
        self.masks
            .as_ref()
            .map(|m| Ok(Tensor::from_slice(m, (self.n, 1, self.side, self.side), device)?.to_dtype(dtype)?))
            .transpose()
    }

    /// Rows of optional labels for the masked multi-label loss.
    pub fn marker_rows(&self) -> Vec<Vec<Option<f64>>> {
        let k = self.k();
        let known = self.known.as_ref();
        (0..self.n)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let idx = i * k + j;
                        known.is_none_or(|kn| kn[idx]).then(|| self.labels[idx] as f64)
                    })
                    .collect()
            })
            .collect()
    }

    /// SHA-256 over ids and image bytes; identifies the data a run saw.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for v in &self.images {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds a batch from `idx`, applying augmentation when `aug` is given.
/// Sample `i` of epoch `epoch` always draws from the same generator stream.
pub fn assemble(data: &Dataset, idx: &[usize], aug: Option<(&AugmentConfig, u64)>) -> Result<BatchData> {
    let side = data.side;
    let plane = side * side;
    let mut b = BatchData {
        ids: Vec::with_capacity(idx.len()),
        images: Vec::with_capacity(idx.len() * 3 * plane),
        labels: Vec::new(),
        masks: (data.task == Task::Segment).then(Vec::new),
        known: (data.task == Task::Subtype).then(Vec::new),
        n: idx.len(),
        side,
    };
    for &i in idx {
        let (mut img, mut mask) = data.load(i)?;
        if let Some((cfg, epoch)) = aug {
            let mut rng = rng_for(cfg.seed, (epoch << 32) | i as u64);
            let (g, m) = apply_geometric(&img, mask.as_ref(), cfg, &mut rng)?;
            img = apply_photometric(&g, cfg, &mut rng)?;
            mask = m;
        }
        b.ids.push(data.samples[i].id().to_string());
        b.images.extend_from_slice(&img.data);
        match &data.samples[i].target {
            Target::Binary(y) => b.labels.push(*y),
            Target::Mask(_) => {
                b.labels.push(1.0);
                let m = mask.expect("segmentation samples carry masks");
                b.masks.as_mut().expect("segment batch").extend(m.as_f32());
            }
            Target::Markers(ms) => {
                for v in ms {
                    b.labels.push(v.unwrap_or(0.0));
                    b.known.as_mut().expect("subtype batch").push(v.is_some());
                }
            }
        }
    }
    Ok(b)
}
