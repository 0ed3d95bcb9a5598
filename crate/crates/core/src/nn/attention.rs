use candle_core::{Tensor, D};

use super::layers::{global_avg_pool, global_max_pool, sigmoid, upsample_to, Conv2d, Linear};
use super::params::{Init, ParamBuilder};
use crate::{Error, Result};

pub const CBAM_REDUCTION: usize = 16;
pub const CBAM_KERNEL: usize = 7;
pub const DEFAULT_TOKEN_BUDGET: usize = 4096;

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug)]
pub struct Cbam {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv2d,
    pub channels: usize,
    pub reduction: usize,
}

impl Cbam {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Self::with_reduction(pb, channels, CBAM_REDUCTION)
    }

    pub fn with_reduction(pb: &ParamBuilder, channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::invalid("cbam needs positive channels and reduction"));
        }
        let reduction = if channels < reduction {
            log::warn!("cbam reduction {reduction} exceeds {channels} channels, clamping to {channels}");
            channels
        } else {
            reduction
        };
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(&pb.pp("mlp.0"), channels, hidden)?,
            fc2: Linear::new(&pb.pp("mlp.1"), hidden, channels)?,
            spatial: Conv2d::new(&pb.pp("spatial"), 2, 1, CBAM_KERNEL, 1, true)?,
            channels,
            reduction,
        })
    }

    fn mlp(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(v)?.relu()?)
    }

    /// Channel weights, shape (b, c, 1, 1).
    pub fn channel_weights(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let a = (self.mlp(&global_avg_pool(x)?)? + self.mlp(&global_max_pool(x)?)?)?;
        sigmoid(&a)?.reshape((b, c, 1, 1)).map_err(Into::into)
    }

    /// Spatial weights, shape (b, 1, h, w).
    pub fn spatial_weights(&self, x: &Tensor) -> Result<Tensor> {
        let desc = Tensor::cat(&[x.mean_keepdim(1)?, x.max_keepdim(1)?], 1)?;
        sigmoid(&self.spatial.forward(&desc)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.broadcast_mul(&self.channel_weights(x)?)?;
        Ok(x.broadcast_mul(&self.spatial_weights(&x)?)?)
    }
}

/// Additive attention gate on a skip connection.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    wg: Conv2d,
    ws: Conv2d,
    pub psi: Conv2d,
}

impl AttentionGate {
    pub fn new(pb: &ParamBuilder, gating_ch: usize, skip_ch: usize, inter_ch: usize) -> Result<Self> {
        let inter = inter_ch.max(1);
        Ok(Self {
            wg: Conv2d::new(&pb.pp("wg"), gating_ch, inter, 1, 1, false)?,
            ws: Conv2d::new(&pb.pp("ws"), skip_ch, inter, 1, 1, true)?,
            psi: Conv2d::new(&pb.pp("psi"), inter, 1, 1, 1, true)?,
        })
    }

    /// Gate coefficients α, shape (b, 1, h, w) of the skip.
    pub fn coefficients(&self, gating: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let (gb, _, _, _) = gating.dims4()?;
        let (sb, _, h, w) = skip.dims4()?;
        if gb != sb {
            return Err(Error::Shape(format!("attention gate batch mismatch: gating {gb}, skip {sb}")));
        }
        let g = upsample_to(&self.wg.forward(gating)?, h, w)?;
        let s = self.ws.forward(skip)?;
        sigmoid(&self.psi.forward(&(g + s)?.relu()?)?)
    }

    pub fn forward(&self, gating: &Tensor, skip: &Tensor) -> Result<Tensor> {
        Ok(skip.broadcast_mul(&self.coefficients(gating, skip)?)?)
    }
}

/// Non-local self-attention over spatial positions with a zero-initialized
/// residual scale, so the block starts as the identity.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    pub gamma: Tensor,
    pub token_budget: usize,
    dk: usize,
}

impl SelfAttention {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let dk = (channels / 8).max(1);
        Ok(Self {
            q: Conv2d::new(&pb.pp("query"), channels, dk, 1, 1, true)?,
            k: Conv2d::new(&pb.pp("key"), channels, dk, 1, 1, true)?,
            v: Conv2d::new(&pb.pp("value"), channels, channels, 1, 1, true)?,
            gamma: pb.param("gamma", &[1], Init::Zeros)?,
            token_budget: DEFAULT_TOKEN_BUDGET,
            dk,
        })
    }

    /// Attention matrix (b, n, n); rows sum to one.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let n = h * w;
        if n > self.token_budget {
            return Err(Error::Shape(format!(
                "self-attention over {n} positions exceeds the token budget {}; insert it at a deeper stage",
                self.token_budget
            )));
        }
        let q = self.q.forward(x)?.reshape((b, self.dk, n))?.transpose(1, 2)?;
        let k = self.k.forward(x)?.reshape((b, self.dk, n))?;
        let logits = (q.matmul(&k)? / (self.dk as f64).sqrt())?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// The unscaled attended values, (b, c, h, w).
    pub fn attended(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let attn = self.attention(x)?;
        let v = self.v.forward(x)?.reshape((b, c, h * w))?;
        Ok(v.matmul(&attn.transpose(1, 2)?)?.reshape((b, c, h, w))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let o = self.attended(x)?;
        Ok((x + o.broadcast_mul(&self.gamma)?)?)
    }
}

/// Squeeze-and-excitation used inside MBConv blocks.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    pub fn new(pb: &ParamBuilder, channels: usize, squeezed: usize) -> Result<Self> {
        let s = squeezed.max(1);
        Ok(Self {
            reduce: Conv2d::new(&pb.pp("reduce"), channels, s, 1, 1, true)?,
            expand: Conv2d::new(&pb.pp("expand"), s, channels, 1, 1, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let s = super::layers::silu(&self.reduce.forward(&s)?)?;
        let s = sigmoid(&self.expand.forward(&s)?)?;
        Ok(x.broadcast_mul(&s)?)
    }
}
