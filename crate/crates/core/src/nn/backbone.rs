//! Encoder families. Each backbone is a list of stages; stage `i` halves the
//! resolution (ConvNeXt's first stage quarters it) and the stage outputs form
//! the feature pyramid consumed by decoders and classifier heads.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::attention::SqueezeExcite;
use super::layers::{silu, BatchNorm2d, Conv2d, Ctx, LayerNorm2d};
use super::params::{Init, ParamBuilder};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    EfficientnetB0,
    Resnet34,
    Resnet50,
    ConvnextTiny,
    /// The double-convolution encoder of the original UNet.
    Plain,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::EfficientnetB0,
        BackboneKind::Resnet34,
        BackboneKind::Resnet50,
        BackboneKind::ConvnextTiny,
        BackboneKind::Plain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::EfficientnetB0 => "efficientnet_b0",
            BackboneKind::Resnet34 => "resnet34",
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::ConvnextTiny => "convnext_tiny",
            BackboneKind::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown backbone '{s}'")))
    }
}

/// Channel and depth scaling shared by all families.
#[derive(Clone, Copy, Debug)]
pub struct Scale {
    pub width: f64,
    pub depth: f64,
}

impl Scale {
    pub fn ch(&self, c: usize) -> usize {
        ((c as f64 * self.width).round() as usize).max(4)
    }

    pub fn blocks(&self, n: usize) -> usize {
        ((n as f64 * self.depth).round() as usize).max(1)
    }
}

fn conv_bn(pb: &ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize) -> Result<(Conv2d, BatchNorm2d)> {
    Ok((
        Conv2d::new(&pb.pp("conv"), cin, cout, k, stride, false)?,
        BatchNorm2d::new(&pb.pp("bn"), cout)?,
    ))
}

#[derive(Clone, Debug)]
struct BasicBlock {
    c1: (Conv2d, BatchNorm2d),
    c2: (Conv2d, BatchNorm2d),
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let down = if stride != 1 || cin != cout {
            Some(conv_bn(&pb.pp("down"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            c1: conv_bn(&pb.pp("c1"), cin, cout, 3, stride)?,
            c2: conv_bn(&pb.pp("c2"), cout, cout, 3, 1)?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.c1.1.forward(&self.c1.0.forward(x)?, ctx)?.relu()?;
        let y = self.c2.1.forward(&self.c2.0.forward(&y)?, ctx)?;
        let id = match &self.down {
            Some((c, b)) => b.forward(&c.forward(x)?, ctx)?,
            None => x.clone(),
        };
        Ok((y + id)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    c1: (Conv2d, BatchNorm2d),
    c2: (Conv2d, BatchNorm2d),
    c3: (Conv2d, BatchNorm2d),
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(pb: &ParamBuilder, cin: usize, mid: usize, cout: usize, stride: usize) -> Result<Self> {
        let down = if stride != 1 || cin != cout {
            Some(conv_bn(&pb.pp("down"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            c1: conv_bn(&pb.pp("c1"), cin, mid, 1, 1)?,
            c2: conv_bn(&pb.pp("c2"), mid, mid, 3, stride)?,
            c3: conv_bn(&pb.pp("c3"), mid, cout, 1, 1)?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.c1.1.forward(&self.c1.0.forward(x)?, ctx)?.relu()?;
        let y = self.c2.1.forward(&self.c2.0.forward(&y)?, ctx)?.relu()?;
        let y = self.c3.1.forward(&self.c3.0.forward(&y)?, ctx)?;
        let id = match &self.down {
            Some((c, b)) => b.forward(&c.forward(x)?, ctx)?,
            None => x.clone(),
        };
        Ok((y + id)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct MbConv {
    expand: Option<(Conv2d, BatchNorm2d)>,
    dw: (Conv2d, BatchNorm2d),
    se: SqueezeExcite,
    project: (Conv2d, BatchNorm2d),
    residual: bool,
}

impl MbConv {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize, expand: usize, k: usize, stride: usize) -> Result<Self> {
        let mid = cin * expand;
        let expand = if expand != 1 { Some(conv_bn(&pb.pp("expand"), cin, mid, 1, 1)?) } else { None };
        Ok(Self {
            expand,
            dw: (
                Conv2d::depthwise(&pb.pp("dw.conv"), mid, k, stride, false)?,
                BatchNorm2d::new(&pb.pp("dw.bn"), mid)?,
            ),
            se: SqueezeExcite::new(&pb.pp("se"), mid, cin / 4)?,
            project: conv_bn(&pb.pp("project"), mid, cout, 1, 1)?,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut y = x.clone();
        if let Some((c, b)) = &self.expand {
            y = silu(&b.forward(&c.forward(&y)?, ctx)?)?;
        }
        y = silu(&self.dw.1.forward(&self.dw.0.forward(&y)?, ctx)?)?;
        y = self.se.forward(&y)?;
        y = self.project.1.forward(&self.project.0.forward(&y)?, ctx)?;
        Ok(if self.residual { (y + x)? } else { y })
    }
}

#[derive(Clone, Debug)]
struct ConvNextBlock {
    dw: Conv2d,
    norm: LayerNorm2d,
    pw1: Conv2d,
    pw2: Conv2d,
    scale: Tensor,
}

impl ConvNextBlock {
    fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            dw: Conv2d::depthwise(&pb.pp("dw"), c, 7, 1, true)?,
            norm: LayerNorm2d::new(&pb.pp("norm"), c)?,
            pw1: Conv2d::new(&pb.pp("pw1"), c, 4 * c, 1, 1, true)?,
            pw2: Conv2d::new(&pb.pp("pw2"), 4 * c, c, 1, 1, true)?,
            scale: pb.param("layer_scale", &[c], Init::Const(1e-6))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let y = self.norm.forward(&self.dw.forward(x)?)?;
        let y = self.pw2.forward(&self.pw1.forward(&y)?.gelu_erf()?)?;
        Ok((x + y.broadcast_mul(&self.scale.reshape((1, c, 1, 1))?)?)?)
    }
}

/// Two 3×3 conv-BN-ReLU layers; the unit of the plain encoder and of every
/// decoder node.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    a: (Conv2d, BatchNorm2d),
    b: (Conv2d, BatchNorm2d),
}

impl ConvBlock {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            a: conv_bn(&pb.pp("a"), cin, cout, 3, 1)?,
            b: conv_bn(&pb.pp("b"), cout, cout, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.a.1.forward(&self.a.0.forward(x)?, ctx)?.relu()?;
        Ok(self.b.1.forward(&self.b.0.forward(&y)?, ctx)?.relu()?)
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Stem(Conv2d, BatchNorm2d, Activation),
    StemLn(Conv2d, LayerNorm2d),
    Down(LayerNorm2d, Conv2d),
    MaxPool,
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
    MbConv(MbConv),
    ConvNext(ConvNextBlock),
    Double(ConvBlock),
}

#[derive(Clone, Copy, Debug)]
enum Activation {
    Relu,
    Silu,
}

impl Layer {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match self {
            Layer::Stem(c, b, act) => {
                let y = b.forward(&c.forward(x)?, ctx)?;
                match act {
                    Activation::Relu => Ok(y.relu()?),
                    Activation::Silu => silu(&y),
                }
            }
            Layer::StemLn(c, n) => n.forward(&c.forward(x)?),
            Layer::Down(n, c) => c.forward(&n.forward(x)?),
            Layer::MaxPool => {
                // 3×3 stride-2 pooling with padding 1, as in ResNet.
                let p = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
                let (_, _, h, w) = x.dims4()?;
                let oh = (h - 1) / 2 + 1;
                let ow = (w - 1) / 2 + 1;
                let mut m: Option<Tensor> = None;
                for i in 0..3 {
                    for j in 0..3 {
                        let v = strided_view(&p, i, j, oh, ow)?;
                        m = Some(match m {
                            None => v,
                            Some(m) => m.maximum(&v)?,
                        });
                    }
                }
                Ok(m.expect("nine views"))
            }
            Layer::Basic(b) => b.forward(x, ctx),
            Layer::Bottleneck(b) => b.forward(x, ctx),
            Layer::MbConv(b) => b.forward(x, ctx),
            Layer::ConvNext(b) => b.forward(x),
            Layer::Double(b) => b.forward(x, ctx),
        }
    }
}

/// Rows `i, i+2, ...` and columns `j, j+2, ...` of a padded map.
fn strided_view(p: &Tensor, i: usize, j: usize, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = p.dims4()?;
    let need_h = i + 2 * oh;
    let need_w = j + 2 * ow;
    let p = if need_h > h { p.pad_with_same(2, 0, need_h - h)? } else { p.clone() };
    let p = if need_w > w { p.pad_with_same(3, 0, need_w - w)? } else { p };
    Ok(p.narrow(2, i, 2 * oh)?
        .narrow(3, j, 2 * ow)?
        .reshape((b, c, oh, 2, ow, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, c, oh, ow))?)
}

#[derive(Clone, Debug)]
pub struct Stage {
    layers: Vec<Layer>,
    pub channels: usize,
    /// Total downsampling factor at the output of this stage.
    pub stride: usize,
}

impl Stage {
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut y = x.clone();
        for l in &self.layers {
            y = l.forward(&y, ctx)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(pb: &ParamBuilder, kind: BackboneKind, scale: Scale) -> Result<Self> {
        let stages = match kind {
            BackboneKind::Resnet34 => resnet(pb, scale, false)?,
            BackboneKind::Resnet50 => resnet(pb, scale, true)?,
            BackboneKind::EfficientnetB0 => efficientnet_b0(pb, scale)?,
            BackboneKind::ConvnextTiny => convnext_tiny(pb, scale)?,
            BackboneKind::Plain => plain(pb, scale)?,
        };
        Ok(Self { kind, stages })
    }

    pub fn stage_names(&self) -> Vec<String> {
        (1..=self.stages.len()).map(|i| format!("stage{i}")).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.channels).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.stride).collect()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.channels).unwrap_or(0)
    }

    /// Required divisor of the input side so every stage halves exactly.
    pub fn input_multiple(&self) -> usize {
        self.stages.last().map(|s| s.stride).unwrap_or(1)
    }

    /// All stage outputs.
    pub fn features(&self, x: &Tensor, ctx: &Ctx) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut y = x.clone();
        for (i, s) in self.stages.iter().enumerate() {
            y = ctx.stage(&format!("stage{}", i + 1), s.forward(&y, ctx)?)?;
            out.push(y.clone());
        }
        Ok(out)
    }
}

fn resnet(pb: &ParamBuilder, s: Scale, bottleneck: bool) -> Result<Vec<Stage>> {
    let stem_c = s.ch(64);
    let mut stages = vec![Stage {
        layers: vec![Layer::Stem(
            Conv2d::new(&pb.pp("stem.conv"), 3, stem_c, 7, 2, false)?,
            BatchNorm2d::new(&pb.pp("stem.bn"), stem_c)?,
            Activation::Relu,
        )],
        channels: stem_c,
        stride: 2,
    }];
    let depths = [3, 4, 6, 3];
    let widths = [64, 128, 256, 512];
    let mut cin = stem_c;
    let mut stride = 2;
    for (si, (&d, &w)) in depths.iter().zip(&widths).enumerate() {
        let mut layers = Vec::new();
        let first_stride = if si == 0 {
            layers.push(Layer::MaxPool);
            1
        } else {
            2
        };
        stride *= 2;
        let mid = s.ch(w);
        let cout = if bottleneck { s.ch(w * 4) } else { mid };
        for bi in 0..s.blocks(d) {
            let bp = pb.pp(format!("layer{}.{bi}", si + 1));
            let st = if bi == 0 { first_stride } else { 1 };
            layers.push(if bottleneck {
                Layer::Bottleneck(Bottleneck::new(&bp, cin, mid, cout, st)?)
            } else {
                Layer::Basic(BasicBlock::new(&bp, cin, cout, st)?)
            });
            cin = cout;
        }
        stages.push(Stage { layers, channels: cout, stride });
    }
    Ok(stages)
}

fn efficientnet_b0(pb: &ParamBuilder, s: Scale) -> Result<Vec<Stage>> {
    // (expand, kernel, stride, channels, repeats, pyramid stage)
    const BLOCKS: [(usize, usize, usize, usize, usize, usize); 7] = [
        (1, 3, 1, 16, 1, 0),
        (6, 3, 2, 24, 2, 1),
        (6, 5, 2, 40, 2, 2),
        (6, 3, 2, 80, 3, 3),
        (6, 5, 1, 112, 3, 3),
        (6, 5, 2, 192, 4, 4),
        (6, 3, 1, 320, 1, 4),
    ];
    let stem_c = s.ch(32);
    let mut groups: Vec<Vec<Layer>> = vec![vec![Layer::Stem(
        Conv2d::new(&pb.pp("stem.conv"), 3, stem_c, 3, 2, false)?,
        BatchNorm2d::new(&pb.pp("stem.bn"), stem_c)?,
        Activation::Silu,
    )]];
    groups.resize_with(5, Vec::new);
    let mut chans = [0usize; 5];
    let mut cin = stem_c;
    for (bi, &(e, k, st, c, r, g)) in BLOCKS.iter().enumerate() {
        let cout = s.ch(c);
        for ri in 0..s.blocks(r) {
            let bp = pb.pp(format!("blocks.{bi}.{ri}"));
            let stride = if ri == 0 { st } else { 1 };
            groups[g].push(Layer::MbConv(MbConv::new(&bp, cin, cout, e, k, stride)?));
            cin = cout;
        }
        chans[g] = cout;
    }
    let head_c = s.ch(1280);
    groups[4].push(Layer::Stem(
        Conv2d::new(&pb.pp("head.conv"), cin, head_c, 1, 1, false)?,
        BatchNorm2d::new(&pb.pp("head.bn"), head_c)?,
        Activation::Silu,
    ));
    chans[4] = head_c;
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, layers)| Stage { layers, channels: chans[i], stride: 2 << i })
        .collect())
}

fn convnext_tiny(pb: &ParamBuilder, s: Scale) -> Result<Vec<Stage>> {
    let depths = [3, 3, 9, 3];
    let widths = [96, 192, 384, 768].map(|w| s.ch(w));
    let mut stages = Vec::new();
    for i in 0..4 {
        let mut layers = Vec::new();
        if i == 0 {
            layers.push(Layer::StemLn(
                Conv2d::new(&pb.pp("stem.conv"), 3, widths[0], 4, 4, true)?.with_padding(0),
                LayerNorm2d::new(&pb.pp("stem.norm"), widths[0])?,
            ));
        } else {
            layers.push(Layer::Down(
                LayerNorm2d::new(&pb.pp(format!("down{i}.norm")), widths[i - 1])?,
                Conv2d::new(&pb.pp(format!("down{i}.conv")), widths[i - 1], widths[i], 2, 2, true)?.with_padding(0),
            ));
        }
        for bi in 0..s.blocks(depths[i]) {
            layers.push(Layer::ConvNext(ConvNextBlock::new(&pb.pp(format!("stages.{i}.{bi}")), widths[i])?));
        }
        stages.push(Stage { layers, channels: widths[i], stride: 4 << i });
    }
    Ok(stages)
}

fn plain(pb: &ParamBuilder, s: Scale) -> Result<Vec<Stage>> {
    let widths = [64, 128, 256, 512, 1024].map(|w| s.ch(w));
    let mut stages = Vec::new();
    let mut cin = 3;
    for (i, &w) in widths.iter().enumerate() {
        let mut layers = Vec::new();
        if i > 0 {
            layers.push(Layer::MaxPool);
        }
        layers.push(Layer::Double(ConvBlock::new(&pb.pp(format!("enc{i}")), cin, w)?));
        stages.push(Stage { layers, channels: w, stride: 1 << i });
        cin = w;
    }
    Ok(stages)
}
