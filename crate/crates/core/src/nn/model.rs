use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::attention::{AttentionGate, Cbam, SelfAttention, DEFAULT_TOKEN_BUDGET};
use super::backbone::{Backbone, BackboneKind, ConvBlock, Scale};
use super::layers::{dropout, global_avg_pool, upsample_to, Conv2d, Ctx, LayerNorm2d, Linear};
use super::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Segment,
    Subtype,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Classify, Task::Segment, Task::Subtype];

    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
            Task::Subtype => "subtype",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task '{s}' (expected classify, segment or subtype)")))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Unet,
    Unetpp,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub backbone: BackboneKind,
    pub use_cbam: bool,
    pub use_attgate: bool,
    pub use_selfatt: bool,
    pub decoder: DecoderKind,
    pub heads: usize,
    pub dropout: f64,
    /// Initialize the backbone from `weights` instead of at random.
    pub pretrained: bool,
    pub weights: Option<PathBuf>,
    /// Channel multiplier applied to every layer.
    pub width: f64,
    /// Block-count multiplier applied to every stage.
    pub depth: f64,
    pub input_side: usize,
    pub token_budget: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::classifier()
    }
}

impl ModelConfig {
    pub fn classifier() -> Self {
        Self {
            task: Task::Classify,
            backbone: BackboneKind::EfficientnetB0,
            use_cbam: true,
            use_attgate: false,
            use_selfatt: false,
            decoder: DecoderKind::None,
            heads: 1,
            dropout: 0.2,
            pretrained: false,
            weights: None,
            width: 1.0,
            depth: 1.0,
            input_side: 512,
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }

    pub fn segmenter() -> Self {
        Self {
            task: Task::Segment,
            backbone: BackboneKind::Resnet34,
            use_cbam: false,
            use_attgate: true,
            use_selfatt: true,
            decoder: DecoderKind::Unetpp,
            heads: 1,
            dropout: 0.0,
            ..Self::classifier()
        }
    }

    pub fn subtyper() -> Self {
        Self {
            task: Task::Subtype,
            backbone: BackboneKind::ConvnextTiny,
            use_cbam: false,
            heads: 3,
            dropout: 0.3,
            ..Self::classifier()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classify => Self::classifier(),
            Task::Segment => Self::segmenter(),
            Task::Subtype => Self::subtyper(),
        }
    }

    /// Reduced-scale variant: 64×64 inputs, an eighth of the channels and
    /// roughly a third of the blocks.
    pub fn toy(mut self) -> Self {
        self.width = 0.125;
        self.depth = 0.34;
        self.input_side = 64;
        self
    }

    pub fn scale(&self) -> Scale {
        Scale { width: self.width, depth: self.depth }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task == Task::Segment && self.decoder == DecoderKind::None {
            return Err(Error::Config("segmentation requires a decoder (unet or unetpp)".into()));
        }
        if self.task != Task::Segment && self.decoder != DecoderKind::None {
            return Err(Error::Config(format!("task {} takes no decoder", self.task)));
        }
        if self.task == Task::Subtype && self.heads != 3 {
            return Err(Error::Config(format!("subtyping needs 3 heads, got {}", self.heads)));
        }
        if self.task != Task::Subtype && self.heads != 1 {
            return Err(Error::Config(format!("task {} needs 1 head, got {}", self.task, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.width > 0.0 && self.width.is_finite() && self.depth > 0.0 && self.depth.is_finite()) {
            return Err(Error::Config("width and depth multipliers must be positive".into()));
        }
        if self.pretrained && self.weights.is_none() {
            return Err(Error::Config("pretrained backbone requested but no weights file given".into()));
        }
        if self.task == Task::Segment && self.backbone == BackboneKind::ConvnextTiny {
            return Err(Error::Config(
                "unsupported combination: convnext_tiny has no stride-2 feature level for a five-level decoder".into(),
            ));
        }
        if self.task != Task::Segment && (self.use_attgate || self.use_selfatt) {
            return Err(Error::Config("attention gates and self-attention apply to segmentation only".into()));
        }
        if self.task == Task::Segment && self.use_cbam {
            return Err(Error::Config("cbam applies to classification and subtyping only".into()));
        }
        if self.input_side == 0 || self.input_side % 32 != 0 {
            return Err(Error::Config(format!("input side {} must be a positive multiple of 32", self.input_side)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ClassifierNet {
    backbone: Backbone,
    cbams: Vec<Cbam>,
    norm: Option<LayerNorm2d>,
    head: Linear,
    dropout: f64,
}

impl ClassifierNet {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, stage) in self.backbone.stages.iter().enumerate() {
            y = stage.forward(&y, ctx)?;
            if let Some(c) = self.cbams.get(i) {
                y = c.forward(&y)?;
            }
            y = ctx.stage(&format!("stage{}", i + 1), y)?;
        }
        let (b, c, _, _) = y.dims4()?;
        let mut v = global_avg_pool(&y)?;
        if let Some(n) = &self.norm {
            v = n.forward(&v.reshape((b, c, 1, 1))?)?.reshape((b, c))?;
        }
        let v = dropout(&v, self.dropout, ctx)?;
        self.head.forward(&v)
    }
}

#[derive(Clone, Debug)]
struct Node {
    block: ConvBlock,
    gates: Vec<Option<AttentionGate>>,
}

#[derive(Clone, Debug)]
struct SegmenterNet {
    backbone: Backbone,
    selfatt: Option<SelfAttention>,
    decoder: DecoderKind,
    nodes: BTreeMap<(usize, usize), Node>,
    refine: Option<ConvBlock>,
    head: Conv2d,
}

const LEVELS: usize = 5;
const DECODER_FILTERS: [usize; LEVELS] = [32, 64, 128, 256, 512];

/// Skip inputs of decoder node (i, j): all same-level predecessors for the
/// nested topology, only the encoder feature for the plain one.
fn skip_columns(decoder: DecoderKind, j: usize) -> Vec<usize> {
    match decoder {
        DecoderKind::Unetpp => (0..j).collect(),
        _ => vec![0],
    }
}

fn node_set(decoder: DecoderKind) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 1..LEVELS {
        for i in 0..LEVELS - j {
            if decoder == DecoderKind::Unetpp || i + j == LEVELS - 1 {
                out.push((i, j));
            }
        }
    }
    out
}

impl SegmenterNet {
    fn new(pb: &super::params::ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let scale = cfg.scale();
        let backbone = Backbone::new(&pb.pp("backbone"), cfg.backbone, scale)?;
        let strides = backbone.strides();
        if strides.len() != LEVELS || strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "unsupported combination: backbone {} does not emit a five-level pyramid",
                cfg.backbone.name()
            )));
        }
        let enc = backbone.channels();
        let filters = DECODER_FILTERS.map(|f| scale.ch(f));
        let ch = |i: usize, j: usize| if j == 0 { enc[i] } else { filters[i] };
        let selfatt = if cfg.use_selfatt {
            let mut sa = SelfAttention::new(&pb.pp("selfatt"), enc[LEVELS - 1])?;
            sa.token_budget = cfg.token_budget;
            Some(sa)
        } else {
            None
        };
        let mut nodes = BTreeMap::new();
        for (i, j) in node_set(cfg.decoder) {
            let np = pb.pp(format!("decoder.x{i}_{j}"));
            let skips = skip_columns(cfg.decoder, j);
            let below = ch(i + 1, j - 1);
            let cin = skips.iter().map(|&k| ch(i, k)).sum::<usize>() + below;
            let gates = skips
                .iter()
                .map(|&k| {
                    if cfg.use_attgate {
                        AttentionGate::new(&np.pp(format!("gate{k}")), below, ch(i, k), filters[i] / 2).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            nodes.insert((i, j), Node { block: ConvBlock::new(&np.pp("block"), cin, filters[i])?, gates });
        }
        let (refine, head_in) = if strides[0] > 1 {
            let c = (filters[0] / 2).max(4);
            (Some(ConvBlock::new(&pb.pp("decoder.refine"), filters[0], c)?), c)
        } else {
            (None, filters[0])
        };
        Ok(Self {
            backbone,
            selfatt,
            decoder: cfg.decoder,
            nodes,
            refine,
            head: Conv2d::new(&pb.pp("head"), head_in, 1, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut feats = self.backbone.features(x, ctx)?;
        if let Some(sa) = &self.selfatt {
            let deepest = feats.pop().expect("five levels");
            feats.push(ctx.stage("selfatt", sa.forward(&deepest)?)?);
        }
        let mut grid: BTreeMap<(usize, usize), Tensor> = feats.into_iter().enumerate().map(|(i, f)| ((i, 0), f)).collect();
        // a node needs its left neighbours and the node below-left, so sweep column by column
        let mut order: Vec<_> = self.nodes.iter().collect();
        order.sort_by_key(|(&(i, j), _)| (j, i));
        for (&(i, j), node) in order {
            let gating = &grid[&(i + 1, j - 1)];
            let (_, _, sh, sw) = grid[&(i, 0)].dims4()?;
            let mut inputs = Vec::new();
            for (k, gate) in skip_columns(self.decoder, j).into_iter().zip(&node.gates) {
                let skip = &grid[&(i, k)];
                inputs.push(match gate {
                    Some(g) => g.forward(gating, skip)?,
                    None => skip.clone(),
                });
            }
            inputs.push(upsample_to(gating, sh, sw)?);
            let y = node.block.forward(&Tensor::cat(&inputs, 1)?, ctx)?;
            grid.insert((i, j), y);
        }
        let mut y = grid.remove(&(0, LEVELS - 1)).expect("final decoder node");
        if let Some(r) = &self.refine {
            y = r.forward(&upsample_to(&y, h, w)?, ctx)?;
        }
        y = ctx.stage("decoder", y)?;
        self.head.forward(&y)
    }
}

#[derive(Clone, Debug)]
enum Net {
    Classifier(ClassifierNet),
    Segmenter(SegmenterNet),
}

/// A built network together with the store that owns its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    store: ParamStore,
    net: Net,
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_with(cfg, seed, DType::F32, Device::Cpu)
    }

    pub fn build_with(cfg: &ModelConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, device);
        let pb = store.root();
        let net = match cfg.task {
            Task::Segment => Net::Segmenter(SegmenterNet::new(&pb, cfg)?),
            Task::Classify | Task::Subtype => {
                let backbone = Backbone::new(&pb.pp("backbone"), cfg.backbone, cfg.scale())?;
                let cbams = if cfg.use_cbam {
                    backbone
                        .channels()
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| Cbam::new(&pb.pp(format!("cbam{}", i + 1)), c))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                let c = backbone.out_channels();
                let norm = if cfg.backbone == BackboneKind::ConvnextTiny {
                    Some(LayerNorm2d::new(&pb.pp("head_norm"), c)?)
                } else {
                    None
                };
                let head = Linear::new(&pb.pp("head"), c, cfg.heads)?;
                Net::Classifier(ClassifierNet { backbone, cbams, norm, head, dropout: cfg.dropout })
            }
        };
        let model = Self { config: cfg.clone(), store, net };
        if cfg.pretrained {
            let path = cfg.weights.as_ref().expect("validated");
            let tensors = super::checkpoint::read_tensors(path, model.store.device())?;
            let n = model.store.load_prefix(&tensors, "backbone.")?;
            log::info!("initialized {n} backbone tensors from {}", path.display());
        }
        Ok(model)
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    fn backbone(&self) -> &Backbone {
        match &self.net {
            Net::Classifier(c) => &c.backbone,
            Net::Segmenter(s) => &s.backbone,
        }
    }

    /// Names accepted by [`Ctx::with_tap`], shallowest first.
    pub fn stage_names(&self) -> Vec<String> {
        let mut names = self.backbone().stage_names();
        if let Net::Segmenter(s) = &self.net {
            if s.selfatt.is_some() {
                names.push("selfatt".into());
            }
            names.push("decoder".into());
        }
        names
    }

    /// Spatial side of each backbone stage for a square input of `side`.
    pub fn stage_sides(&self, side: usize) -> Vec<(String, usize)> {
        let bb = self.backbone();
        bb.stage_names().into_iter().zip(bb.strides()).map(|(n, s)| (n, side / s)).collect()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.backbone().input_multiple();
        if c != 3 || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("model expects (b, 3, h, w) with h and w multiples of {m}, got {:?}", x.dims())));
        }
        Ok(())
    }

    /// Raw logits: (b, 1) for classification, (b, 3) for subtyping and
    /// (b, 1, h, w) for segmentation.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.check_input(x)?;
        let x = x.to_dtype(self.dtype())?;
        match &self.net {
            Net::Classifier(c) => c.forward(&x, ctx),
            Net::Segmenter(s) => s.forward(&x, ctx),
        }
    }

    /// Sigmoid probabilities in eval mode.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        super::layers::sigmoid(&self.forward(x, &Ctx::eval())?.detach())
    }
}
