use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNABLE: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Marker {
    Negative,
    Positive,
    Unknown,
}

impl Marker {
    pub fn from_label(v: Option<u8>) -> Self {
        match v {
            Some(1) => Marker::Positive,
            Some(_) => Marker::Negative,
            None => Marker::Unknown,
        }
    }

    /// 0/1 for known markers.
    pub fn value(self) -> Option<f32> {
        match self {
            Marker::Negative => Some(0.0),
            Marker::Positive => Some(1.0),
            Marker::Unknown => None,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Marker::Negative => '0',
            Marker::Positive => '1',
            Marker::Unknown => 'u',
        }
    }
}

/// HER-2, Ki-67 and p53 status for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubtypeLabels {
    pub her2: Marker,
    pub ki67: Marker,
    pub p53: Marker,
}

impl SubtypeLabels {
    pub const NAMES: [&'static str; 3] = ["her2", "ki67", "p53"];

    pub fn as_array(&self) -> [Marker; 3] {
        [self.her2, self.ki67, self.p53]
    }

    pub fn any_known(&self) -> bool {
        self.as_array().iter().any(|m| *m != Marker::Unknown)
    }
}

/// One manifest row. Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub patient_id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tumor_label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub her2: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ki67: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p53: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, patient_id: impl Into<String>, image_path: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            patient_id: patient_id.into(),
            image_path: image_path.into(),
            tumor_label: None,
            mask_path: None,
            her2: None,
            ki67: None,
            p53: None,
            split: None,
        }
    }

    pub fn subtype(&self) -> SubtypeLabels {
        SubtypeLabels {
            her2: Marker::from_label(self.her2),
            ki67: Marker::from_label(self.ki67),
            p53: Marker::from_label(self.p53),
        }
    }

    pub fn split(&self) -> Split {
        self.split.unwrap_or(Split::Unassigned)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn image_path(&self, e: &ManifestEntry) -> PathBuf {
        self.resolve(&e.image_path)
    }

    pub fn mask_path(&self, e: &ManifestEntry) -> Option<PathBuf> {
        e.mask_path.as_deref().map(|p| self.resolve(p))
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.patient_id.as_str()))
            .map(|e| e.patient_id.as_str())
            .collect()
    }

    pub fn with_split(&self, split: Split) -> DatasetManifest {
        self.filtered(|e| e.split() == split)
    }

    pub fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut patient_split: HashMap<&str, Split> = HashMap::new();
        for e in &self.entries {
            if e.id.is_empty() {
                return Err(Error::validation("record with empty id"));
            }
            if e.patient_id.is_empty() {
                return Err(Error::validation(format!("record '{}' has empty patient_id", e.id)));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::validation(format!("duplicate record id '{}'", e.id)));
            }
            for (name, v) in [
                ("tumor_label", e.tumor_label),
                ("her2", e.her2),
                ("ki67", e.ki67),
                ("p53", e.p53),
            ] {
                if let Some(v) = v {
                    if v > 1 {
                        return Err(Error::validation(format!(
                            "record '{}': {name} must be 0 or 1, got {v}",
                            e.id
                        )));
                    }
                }
            }
            if e.mask_path.is_some() && e.tumor_label != Some(1) {
                return Err(Error::validation(format!(
                    "record '{}' has a mask_path but tumor_label is not 1",
                    e.id
                )));
            }
            if let Some(split) = e.split {
                match patient_split.get(e.patient_id.as_str()) {
                    Some(&prev) if prev != split => {
                        return Err(Error::validation(format!(
                            "patient '{}' spans splits {prev:?} and {split:?}",
                            e.patient_id
                        )));
                    }
                    _ => {
                        patient_split.insert(&e.patient_id, split);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let base_dir = origin
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self::new(entries, base_dir)
    }
}

/// Reads and validates a manifest: a JSON array of records.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text, path)
}
