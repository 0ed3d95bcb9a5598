//! On-disk model formats.
//!
//! A checkpoint is a directory with `weights.safetensors`, `config.json` and
//! `history.json`. An export is one self-describing safetensors file whose
//! metadata carries the model configuration, so a deployment needs nothing
//! else to rebuild the graph.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::{Error, Result};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.json";
pub const EXPORT_FORMAT: &str = "cystonet-graph/1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConfigFile {
    model: ModelConfig,
    epoch: usize,
    #[serde(default)]
    version: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: BTreeMap<String, Tensor>,
    pub history: Vec<EpochRecord>,
    /// Epoch the weights were taken from.
    pub epoch: usize,
    pub version: String,
}

pub(crate) fn read_tensors(path: &Path, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let map = candle_core::safetensors::load(path, device).map_err(|e| match e {
        candle_core::Error::Io(source) => Error::io(path, source),
        other => Error::Validation(format!("{}: {other}", path.display())),
    })?;
    Ok(map.into_iter().collect())
}

fn write_tensors(tensors: &BTreeMap<String, Tensor>, meta: Option<HashMap<String, String>>, path: &Path) -> Result<()> {
    let data: Vec<(&String, &Tensor)> = tensors.iter().collect();
    safetensors::serialize_to_file(data, meta, path)
        .map_err(|e| Error::Validation(format!("writing {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn from_model(model: &Model, history: Vec<EpochRecord>, epoch: usize) -> Result<Self> {
        Ok(Self {
            config: model.config.clone(),
            weights: model.store().snapshot()?,
            history,
            epoch,
            version: format!("{}-e{epoch}", model.config.task),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensors(&self.weights, None, &dir.join(WEIGHTS_FILE))?;
        write_json(
            &ConfigFile { model: self.config.clone(), epoch: self.epoch, version: self.version.clone() },
            &dir.join(CONFIG_FILE),
        )?;
        write_json(&self.history, &dir.join(HISTORY_FILE))?;
        Ok(dir.to_path_buf())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found")));
        }
        let cfg: ConfigFile = read_json(&dir.join(CONFIG_FILE))?;
        let history: Vec<EpochRecord> = read_json(&dir.join(HISTORY_FILE))?;
        let weights = read_tensors(&dir.join(WEIGHTS_FILE), &Device::Cpu)?;
        let version = if cfg.version.is_empty() { format!("{}-e{}", cfg.model.task, cfg.epoch) } else { cfg.version };
        Ok(Self { config: cfg.model, weights, history, epoch: cfg.epoch, version })
    }

    /// Rebuilds the graph and loads the weights.
    pub fn to_model(&self) -> Result<Model> {
        let mut cfg = self.config.clone();
        // The weights already contain any pretrained initialization.
        cfg.pretrained = false;
        cfg.weights = None;
        let model = Model::build_with(&cfg, 0, self.weights.values().next().map(|t| t.dtype()).unwrap_or(candle_core::DType::F32), Device::Cpu)?;
        model.store().load(&self.weights)?;
        Ok(model)
    }

    /// Writes the single-file portable form.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), EXPORT_FORMAT.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("version".to_string(), self.version.clone());
        write_tensors(&self.weights, Some(meta), path)
    }

    /// Reads a file written by [`Checkpoint::export`].
    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(EXPORT_FORMAT) {
            return Err(Error::Validation(format!("{} is not an exported model", path.display())));
        }
        let config: ModelConfig = serde_json::from_str(meta.get("config").map(String::as_str).unwrap_or("{}"))?;
        let epoch = meta.get("epoch").and_then(|e| e.parse().ok()).unwrap_or(0);
        let version = meta.get("version").cloned().unwrap_or_else(|| format!("{}-e{epoch}", config.task));
        let weights = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?.into_iter().collect();
        Ok(Self { config, weights, history: Vec::new(), epoch, version })
    }

    /// Loads either a checkpoint directory or an exported file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            Self::load(path)
        } else {
            Self::import(path)
        }
    }
}
