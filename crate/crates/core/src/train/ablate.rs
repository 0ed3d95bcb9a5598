//! Named configuration overrides and the ablation table driver.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::fit::{fit_named, MixMode, RunReport, TrainConfig};
use crate::losses::ClassLoss;
use crate::nn::{BackboneKind, DecoderKind, Model, ModelConfig, Task};
use crate::{Error, Result};

/// One atomic override.
#[derive(Clone, Debug, PartialEq)]
pub enum Toggle {
    Cutmix,
    Mixup,
    AttGate,
    SelfAtt,
    NoCbam,
    NoMix,
    FocalToBce,
    Set(String, String),
}

/// Keys accepted by `key=value` overrides.
pub const GRID_KEYS: [&str; 10] = [
    "lr0",
    "batch_size",
    "epochs",
    "focal_gamma",
    "focal_alpha",
    "dropout",
    "mixup_alpha",
    "cutmix_alpha",
    "backbone",
    "decoder",
];

impl Toggle {
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        Ok(match t {
            "cutmix" => Toggle::Cutmix,
            "mixup" => Toggle::Mixup,
            "attgate" => Toggle::AttGate,
            "selfatt" => Toggle::SelfAtt,
            "-cbam" => Toggle::NoCbam,
            "-mix" => Toggle::NoMix,
            "focal->bce" | "focal→bce" => Toggle::FocalToBce,
            _ => match t.split_once('=') {
                Some((k, v)) if GRID_KEYS.contains(&k.trim()) && !v.trim().is_empty() => {
                    Toggle::Set(k.trim().to_string(), v.trim().to_string())
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "unknown toggle '{t}' (expected cutmix, mixup, attgate, selfatt, -cbam, -mix, focal->bce or key=value with key in {})",
                        GRID_KEYS.join(", ")
                    )))
                }
            },
        })
    }

    pub fn apply(&self, m: &mut ModelConfig, t: &mut TrainConfig) -> Result<()> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::invalid(format!("'{v}' is not a number")));
        let int = |v: &str| v.parse::<usize>().map_err(|_| Error::invalid(format!("'{v}' is not a non-negative integer")));
        match self {
            Toggle::Cutmix => t.mix = if t.mix == MixMode::Mixup { MixMode::Both } else { MixMode::Cutmix },
            Toggle::Mixup => t.mix = if t.mix == MixMode::Cutmix { MixMode::Both } else { MixMode::Mixup },
            Toggle::AttGate => m.use_attgate = true,
            Toggle::SelfAtt => m.use_selfatt = true,
            Toggle::NoCbam => m.use_cbam = false,
            Toggle::NoMix => t.mix = MixMode::None,
            Toggle::FocalToBce => {
                if t.loss.classification != ClassLoss::Focal {
                    return Err(Error::invalid("focal->bce needs a focal-loss base"));
                }
                t.loss.classification = ClassLoss::Bce
            }
            Toggle::Set(k, v) => match k.as_str() {
                "lr0" => t.lr0 = num(v)?,
                "batch_size" => t.batch_size = int(v)?,
                "epochs" => t.epochs = int(v)?,
                "focal_gamma" => t.loss.focal_gamma = num(v)?,
                "focal_alpha" => t.loss.focal_alpha = num(v)?,
                "dropout" => m.dropout = num(v)?,
                "mixup_alpha" => t.mixup_alpha = num(v)?,
                "cutmix_alpha" => t.cutmix_alpha = num(v)?,
                "backbone" => m.backbone = BackboneKind::parse(v)?,
                "decoder" => {
                    m.decoder = match v.as_str() {
                        "unet" => DecoderKind::Unet,
                        "unetpp" | "unet++" => DecoderKind::Unetpp,
                        _ => return Err(Error::invalid(format!("unknown decoder '{v}'"))),
                    }
                }
                _ => unreachable!("key checked at parse time"),
            },
        }
        Ok(())
    }
}

/// A named row: one or more toggles applied on top of the base.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub toggles: Vec<Toggle>,
}

/// Expands a row spec: atoms joined by `+`, values within an atom split by
/// `|` into a grid. `"mixup+lr0=1e-3|1e-4"` gives two variants.
pub fn expand(spec: &str) -> Result<Vec<Variant>> {
    let mut rows: Vec<(Vec<String>, Vec<Toggle>)> = vec![(Vec::new(), Vec::new())];
    for atom in spec.split('+').map(str::trim) {
        if atom.is_empty() {
            return Err(Error::invalid(format!("empty toggle in '{spec}'")));
        }
        let options: Vec<String> = match atom.split_once('=') {
            Some((k, vs)) => vs.split('|').map(|v| format!("{}={}", k.trim(), v.trim())).collect(),
            None => vec![atom.to_string()],
        };
        let parsed = options.iter().map(|o| Toggle::parse(o).map(|t| (o.clone(), t))).collect::<Result<Vec<_>>>()?;
        rows = rows
            .into_iter()
            .flat_map(|(names, toggles)| {
                parsed.iter().map(move |(n, t)| {
                    let mut names = names.clone();
                    let mut toggles = toggles.clone();
                    names.push(n.clone());
                    toggles.push(t.clone());
                    (names, toggles)
                })
            })
            .collect();
    }
    Ok(rows.into_iter().map(|(n, toggles)| Variant { name: n.join("+"), toggles }).collect())
}

/// Segmentation base for the attention/augmentation study: ResNet34 UNet++
/// with neither attention block and no batch mixing.
pub fn segmentation_base() -> (ModelConfig, TrainConfig) {
    let m = ModelConfig { use_attgate: false, use_selfatt: false, ..ModelConfig::segmenter() };
    (m, TrainConfig::for_task(Task::Segment))
}

/// The seven override rows of the segmentation study.
pub const SEGMENTATION_ROWS: [&str; 7] =
    ["cutmix", "mixup", "attgate", "attgate+mixup", "selfatt", "selfatt+attgate", "selfatt+attgate+mixup"];

/// The three classification ablations.
pub const CLASSIFICATION_ROWS: [&str; 3] = ["-cbam", "-mix", "focal->bce"];

/// The segmentation architecture comparison: (row label, config).
pub fn segmentation_zoo() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig { use_attgate: false, use_selfatt: false, ..ModelConfig::segmenter() };
    let with = |backbone, decoder, attgate| ModelConfig { backbone, decoder, use_attgate: attgate, ..base.clone() };
    vec![
        ("ResNet50-Unet", with(BackboneKind::Resnet50, DecoderKind::Unet, false)),
        ("AttentUnet", with(BackboneKind::Plain, DecoderKind::Unet, true)),
        ("EfficientB0-Unet", with(BackboneKind::EfficientnetB0, DecoderKind::Unet, false)),
        ("Unet++", with(BackboneKind::Plain, DecoderKind::Unetpp, false)),
        ("ResNet34-Unet++", with(BackboneKind::Resnet34, DecoderKind::Unetpp, false)),
        ("ResNet50-Unet++", with(BackboneKind::Resnet50, DecoderKind::Unetpp, false)),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: RunReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: Task,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn columns(task: Task) -> Vec<(&'static str, &'static str)> {
        match task {
            Task::Segment => vec![("Dice", "dice"), ("IoU", "iou"), ("Sensitivity", "sensitivity"), ("Specificity", "specificity")],
            Task::Classify => vec![
                ("Accuracy", "accuracy"),
                ("Precision", "precision"),
                ("Recall", "recall"),
                ("F1", "f1"),
                ("AUC", "auc"),
            ],
            Task::Subtype => vec![("HER-2 AUC", "her2.auc"), ("Ki-67 AUC", "ki67.auc"), ("p53 AUC", "p53.auc"), ("Mean AUC", "mean_auc")],
        }
    }

    /// Markdown rendering, one row per configuration.
    pub fn render(&self) -> String {
        let cols = Self::columns(self.task);
        let mut s = String::from("| Model |");
        for (h, _) in &cols {
            s.push_str(&format!(" {h} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(cols.len()));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("| {} |", r.name));
            for (_, k) in &cols {
                match r.report.metrics.get(k) {
                    Some(v) => s.push_str(&format!(" {v:.4} |")),
                    None => s.push_str(" n/a |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Resolves every row spec into concrete configs; fails before any training
/// if a toggle is unknown or produces an invalid configuration.
pub fn plan(base_model: &ModelConfig, base_train: &TrainConfig, rows: &[String]) -> Result<Vec<(String, ModelConfig, TrainConfig)>> {
    base_model.validate()?;
    base_train.validate()?;
    let mut out = vec![("base".to_string(), base_model.clone(), base_train.clone())];
    for spec in rows {
        for v in expand(spec)? {
            let (mut m, mut t) = (base_model.clone(), base_train.clone());
            for tog in &v.toggles {
                tog.apply(&mut m, &mut t)?;
            }
            m.validate().map_err(|e| Error::invalid(format!("row '{}': {e}", v.name)))?;
            t.validate().map_err(|e| Error::invalid(format!("row '{}': {e}", v.name)))?;
            out.push((v.name, m, t));
        }
    }
    Ok(out)
}

/// Trains the base and every override row with the shared seed and data.
pub fn ablate(base_model: &ModelConfig, base_train: &TrainConfig, rows: &[String], train: &Dataset, val: &Dataset) -> Result<AblationTable> {
    let planned = plan(base_model, base_train, rows)?;
    let mut out = Vec::with_capacity(planned.len());
    for (name, m, t) in planned {
        let model = Model::build(&m, t.seed)?;
        let (_, report) = fit_named(&name, &model, train, val, &t)?;
        out.push(AblationRow { name, report });
    }
    Ok(AblationTable { task: base_train.task, rows: out })
}
