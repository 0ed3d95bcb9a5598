//! Primitive layers. Convolutions are lowered to shifted views plus a matmul,
//! which on CPU is faster than the direct kernels and keeps the autograd graph
//! to ops with well-tested backward passes.

use std::cell::RefCell;

use candle_core::{Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamBuilder};
use crate::{Error, Result};

/// Per-call forward context: train/eval mode, the dropout RNG and an optional
/// activation tap used by Grad-CAM.
pub struct Ctx {
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
    tap_name: Option<String>,
    tapped: RefCell<Option<Var>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            tap_name: None,
            tapped: RefCell::new(None),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            ..Self::eval_with_seed(seed)
        }
    }

    fn eval_with_seed(seed: u64) -> Self {
        Self {
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::eval()
        }
    }

    /// Eval-mode context that captures the output of the named stage as a leaf.
    pub fn with_tap(stage: &str) -> Self {
        Self {
            tap_name: Some(stage.to_string()),
            ..Self::eval()
        }
    }

    /// Called by models at every named stage boundary. When the stage is the
    /// tapped one, the activation is re-rooted as a variable so its gradient
    /// survives the backward pass.
    pub fn stage(&self, name: &str, x: Tensor) -> Result<Tensor> {
        if self.tap_name.as_deref() == Some(name) {
            let v = Var::from_tensor(&x.detach())?;
            let t = v.as_tensor().clone();
            *self.tapped.borrow_mut() = Some(v);
            Ok(t)
        } else {
            Ok(x)
        }
    }

    pub fn tapped(&self) -> Option<Var> {
        self.tapped.borrow().clone()
    }

    fn bernoulli_keep(&self, n: usize, keep: f64) -> Vec<f64> {
        let mut rng = self.rng.borrow_mut();
        (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 }).collect()
    }
}

fn pad_hw(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let x = if top + bottom > 0 { x.pad_with_zeros(2, top, bottom)? } else { x.clone() };
    Ok(if left + right > 0 { x.pad_with_zeros(3, left, right)? } else { x })
}

/// The `k*k` shifted views of `x` for a `k`×`k` window at `stride` with
/// symmetric zero padding. Each view has shape (b, c, oh, ow).
fn shifted_views(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Vec<Tensor>, usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("input {h}x{w} smaller than kernel {k} with padding {pad}")));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    // Extra bottom/right zeros so every strided view can be taken as a
    // contiguous block of stride*o rows and then decimated.
    let need_h = k - 1 + stride * oh;
    let need_w = k - 1 + stride * ow;
    let extra_h = need_h.saturating_sub(h + 2 * pad);
    let extra_w = need_w.saturating_sub(w + 2 * pad);
    let xp = pad_hw(x, pad, pad + extra_h, pad, pad + extra_w)?;
    let (b, c, _, _) = xp.dims4()?;
    let mut views = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let v = if stride == 1 {
                xp.narrow(2, i, oh)?.narrow(3, j, ow)?
            } else {
                xp.narrow(2, i, stride * oh)?
                    .narrow(3, j, stride * ow)?
                    .reshape((b, c, oh, stride, ow, stride))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .reshape((b, c, oh, ow))?
            };
            views.push(v);
        }
    }
    Ok((views, oh, ow))
}

/// Dense 2-D convolution, weight shape (out, in, k, k).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (o, c, k, k2) = weight.dims4()?;
    let (b, xc, _, _) = x.dims4()?;
    if k != k2 || c != xc {
        return Err(Error::Shape(format!("conv weight {:?} incompatible with input {:?}", weight.dims(), x.dims())));
    }
    let (cols, oh, ow) = if k == 1 && pad == 0 {
        let (views, oh, ow) = shifted_views(x, 1, stride, 0)?;
        (views[0].reshape((b, c, oh * ow))?, oh, ow)
    } else {
        let (views, oh, ow) = shifted_views(x, k, stride, pad)?;
        (Tensor::stack(&views, 2)?.reshape((b, c * k * k, oh * ow))?, oh, ow)
    };
    let y = weight.reshape((o, c * k * k))?.broadcast_matmul(&cols)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, o, 1))?)?,
        None => y,
    };
    Ok(y.reshape((b, o, oh, ow))?)
}

/// Depthwise convolution, weight shape (c, 1, k, k).
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (c, one, k, _) = weight.dims4()?;
    let (b, xc, _, _) = x.dims4()?;
    if one != 1 || c != xc {
        return Err(Error::Shape(format!("depthwise weight {:?} incompatible with input {:?}", weight.dims(), x.dims())));
    }
    let (views, oh, ow) = shifted_views(x, k, stride, pad)?;
    let st = Tensor::stack(&views, 2)?.reshape((b, c, k * k, oh * ow))?;
    let y = st.broadcast_mul(&weight.reshape((1, c, k * k, 1))?)?.sum(2)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, c, 1))?)?,
        None => y,
    };
    Ok(y.reshape((b, c, oh, ow))?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        let weight = pb.param("weight", &[cout, cin, k, k], Init::KaimingNormal { fan_in: cin * k * k })?;
        let bias = if bias { Some(pb.param("bias", &[cout], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, stride, padding: k / 2, depthwise: false })
    }

    pub fn depthwise(pb: &ParamBuilder, channels: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        let weight = pb.param("weight", &[channels, 1, k, k], Init::KaimingNormal { fan_in: k * k })?;
        let bias = if bias { Some(pb.param("bias", &[channels], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, stride, padding: k / 2, depthwise: true })
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.depthwise {
            depthwise_conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
        } else {
            conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / (cin.max(1) as f64).sqrt();
        Ok(Self {
            weight: pb.param("weight", &[cout, cin], Init::Uniform { bound })?,
            bias: pb.param("bias", &[cout], Init::Zeros)?,
        })
    }

    /// x: (n, cin) -> (n, cout)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization with running statistics kept as non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("weight", &[c], Init::Ones)?,
            beta: pb.param("bias", &[c], Init::Zeros)?,
            running_mean: pb.buffer("running_mean", &[c], Init::Zeros)?,
            running_var: pb.buffer("running_var", &[c], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if ctx.train {
            let n = (b * h * w) as f64;
            let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let m = self.momentum;
            let unbiased = if n > 1.0 { (&var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Layer normalization over the channel axis of an NCHW tensor.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("weight", &[c], Init::Ones)?,
            beta: pb.param("bias", &[c], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let xn = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Inverted dropout driven by the context RNG; identity in eval mode.
pub fn dropout(x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
    if !ctx.train || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask = ctx.bernoulli_keep(x.elem_count(), keep);
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x.mul(&mask)? / keep)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&sigmoid(x)?)?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.max(D::Minus1)?.max(D::Minus1)?)
}

pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_pool2d(2)?)
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// Nearest upsampling to an exact size via integer factors.
pub fn upsample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    if xh == h && xw == w {
        return Ok(x.clone());
    }
    if h % xh != 0 || w % xw != 0 {
        return Err(Error::Shape(format!("cannot upsample {xh}x{xw} to {h}x{w}")));
    }
    Ok(x.upsample_nearest2d(h, w)?)
}
