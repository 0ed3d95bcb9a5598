//! Training loop, cross-validation and ablation driver.

pub mod ablate;
pub mod crossval;
pub mod data;
pub mod fit;
pub mod schedule;

pub use ablate::{ablate, expand, plan, AblationRow, AblationTable, Toggle, Variant};
pub use crossval::{crossval, crossval_manifest, fold_indices, CrossvalReport, FoldOutcome};
pub use data::{assemble, BatchData, Dataset, Sample, Target};
pub use fit::{evaluate, fit, fit_named, predict, MixMode, Predictions, RunReport, Schedule, Selection, TrainConfig};
pub use schedule::{cosine_lr, EarlyStopper, StopDecision};
