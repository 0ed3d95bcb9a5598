//! Declarative experiment file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nn::{ModelConfig, Task};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest to train on. Entries without a split are split by patient.
    pub manifest: Option<PathBuf>,
    /// Generate a synthetic corpus of this many images instead.
    pub synthetic: Option<usize>,
    /// Evaluation fold count for `crossval`.
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, synthetic: None, folds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub device: String,
    /// Reduced-scale model and inputs.
    pub toy: bool,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Override rows for `ablate`.
    pub ablate: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_task(Task::Classify)
    }
}

impl ExperimentConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            name: task.name().to_string(),
            seed: 0,
            device: "cpu".into(),
            toy: false,
            out: PathBuf::from("runs").join(task.name()),
            data: DataConfig::default(),
            model: ModelConfig::for_task(task),
            train: TrainConfig::for_task(task),
            ablate: Vec::new(),
        }
    }

    /// Keys missing from the file take the defaults of the file's task
    /// (`model.task`, else `train.task`, else classify).
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", origin.display()));
        let user: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let task_of = |section: &str| user.get(section).and_then(|s| s.get("task")).and_then(|t| t.as_str()).map(str::to_string);
        let task = match task_of("model").or_else(|| task_of("train")) {
            Some(t) => Task::parse(&t)?,
            None => Task::Classify,
        };
        let mut merged = toml::Table::try_from(Self::for_task(task)).map_err(|e| bad(&e))?;
        merge(&mut merged, user);
        let mut cfg: Self = toml::Value::Table(merged).try_into().map_err(|e| bad(&e))?;
        let base = origin.parent().unwrap_or(Path::new("."));
        if let Some(m) = cfg.data.manifest.as_mut().filter(|m| m.is_relative()) {
            *m = base.join(&*m);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Applies `toy` and the shared seed, then checks consistency and that
    /// every referenced path exists.
    pub fn resolve(mut self) -> Result<Self> {
        if self.toy {
            self.model = self.model.clone().toy();
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("device '{}' is not available; this build runs on cpu", self.device)));
        }
        if self.model.task != self.train.task {
            return Err(Error::Config(format!("model task {} differs from train task {}", self.model.task, self.train.task)));
        }
        self.model.validate()?;
        self.train.validate()?;
        match (&self.data.manifest, self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("give either data.manifest or data.synthetic, not both".into())),
            (None, None) => return Err(Error::Config("no data: set data.manifest or data.synthetic".into())),
            (Some(m), None) if !m.is_file() => {
                return Err(Error::io(m, std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found")))
            }
            (None, Some(0)) => return Err(Error::Config("data.synthetic must be positive".into())),
            _ => {}
        }
        if let Some(w) = &self.model.weights {
            if !w.exists() {
                return Err(Error::io(w, std::io::Error::new(std::io::ErrorKind::NotFound, "weights file not found")));
            }
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        self.model.task
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
