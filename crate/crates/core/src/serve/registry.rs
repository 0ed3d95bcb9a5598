use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nn::{Checkpoint, Model, Task};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFormat {
    /// Checkpoint directory as written by training.
    #[default]
    Checkpoint,
    /// Single-file exported graph.
    Exported,
}

/// One `[task]` table of the registry file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub format: ModelFormat,
    /// Overrides the version stored with the weights.
    #[serde(default)]
    pub version: Option<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

pub struct RegisteredModel {
    pub model: Model,
    pub version: String,
    pub input_side: usize,
    pub threshold: f64,
    pub source: PathBuf,
    /// Grad-CAM needs the gradient machinery; one explanation at a time per model.
    pub explain_lock: std::sync::Mutex<()>,
}

/// Task to model map; read-only once built.
#[derive(Default)]
pub struct Registry {
    models: BTreeMap<Task, RegisteredModel>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a TOML registry (`[classify]`, `[segment]`, `[subtype]` tables)
    /// and loads every model. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: BTreeMap<String, RegistryEntry> =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reg = Self::new();
        for (name, mut e) in entries {
            let task = Task::parse(&name).map_err(|_| Error::Config(format!("unknown registry section [{name}]")))?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            reg.load_entry(task, &e)?;
        }
        if reg.models.is_empty() {
            return Err(Error::Config(format!("{} registers no models", path.display())));
        }
        Ok(reg)
    }

    pub fn load_entry(&mut self, task: Task, e: &RegistryEntry) -> Result<()> {
        let ck = match e.format {
            ModelFormat::Checkpoint => Checkpoint::load(&e.path)?,
            ModelFormat::Exported => Checkpoint::import(&e.path)?,
        };
        let version = e.version.clone().unwrap_or_else(|| ck.version.clone());
        let model = ck.to_model()?;
        self.insert(task, model, version, e.threshold, e.path.clone())
    }

    pub fn insert(&mut self, task: Task, model: Model, version: String, threshold: f64, source: PathBuf) -> Result<()> {
        if model.task() != task {
            return Err(Error::Config(format!("model at {} is a {} model, registered as {task}", source.display(), model.task())));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("default threshold {threshold} outside (0, 1)")));
        }
        if self.models.contains_key(&task) {
            return Err(Error::Config(format!("a {task} model is already registered")));
        }
        let input_side = model.config.input_side;
        self.models.insert(
            task,
            RegisteredModel { model, version, input_side, threshold, source, explain_lock: std::sync::Mutex::new(()) },
        );
        Ok(())
    }

    pub fn get(&self, task: Task) -> Option<&RegisteredModel> {
        self.models.get(&task)
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.models.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Task, &RegisteredModel)> {
        self.models.iter()
    }
}
