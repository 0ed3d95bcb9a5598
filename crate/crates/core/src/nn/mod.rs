//! Network building blocks and the three model families.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod params;

pub use attention::{AttentionGate, Cbam, SelfAttention, SqueezeExcite};
pub use backbone::{Backbone, BackboneKind, ConvBlock, Scale};
pub use checkpoint::{Checkpoint, EpochRecord};
pub use layers::{conv2d, depthwise_conv2d, dropout, sigmoid, BatchNorm2d, Conv2d, Ctx, LayerNorm2d, Linear};
pub use model::{DecoderKind, Model, ModelConfig, Task};
pub use params::{Init, ParamBuilder, ParamStore};
