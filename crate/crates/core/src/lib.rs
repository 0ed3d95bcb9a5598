//! Multi-task cystoscopic image analysis toolkit.
//!
//! Three model families share one data pipeline:
//!
//! - tumor / non-tumor classification (attention-augmented CNN, focal loss, MixUp/CutMix),
//! - pixel-wise lesion segmentation (residual encoder + nested UNet++ decoder with
//!   optional attention gates and self-attention),
//! - multi-label marker subtyping (HER-2, Ki-67, p53) with masked BCE.
//!
//! Around them sit the evaluation mathematics ([`metrics`]), Grad-CAM saliency
//! ([`explain`]), an HTTP inference service ([`serve`]) and the operator CLI ([`cli`]).

pub mod augment;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod explain;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod serve;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub use candle_core::{DType, Device, Tensor};
