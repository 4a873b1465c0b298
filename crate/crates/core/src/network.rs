//! Feedforward trunk, heads A/B/C, the combined model and sliding-window
//! proposal generation.
//!
//! Parameter names are prefixed by component: `trunk.*`, `head.*` (which
//! includes the coarse mask layer) and `refine.*` (the mask-encoding layer
//! and every refinement module). Two-stage training freezes everything
//! outside `refine.*` in the second stage.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{ConvSpec, Graph, PadMode, Var};
use crate::layers::{Conv, Linear};
use crate::param::{Bound, ParamStore};
use crate::refinement::{RefinementConfig, RefinementStack};
use crate::rng;
use crate::tensor::Tensor;

pub const TRUNK_PREFIX: &str = "trunk.";
pub const HEAD_PREFIX: &str = "head.";
pub const REFINE_PREFIX: &str = "refine.";

const STREAM_TRUNK: u64 = 0x7472_756e;
const STREAM_HEAD: u64 = 0x6865_6164;
const STREAM_REFINE: u64 = 0x7265_666e;

/// Trunk geometry. `width` is W, `pools` is P, `depth` is D (number of 3x3
/// conv layers) and `features` is F (channels after the final 1x1
/// reduction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub width: usize,
    pub pools: usize,
    pub depth: usize,
    pub features: usize,
    /// Channels at full resolution; doubled after every pooling stage unless
    /// `channels` is given.
    pub base_channels: usize,
    /// Explicit output channels for each of the `depth` conv layers.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    pub in_channels: usize,
    /// Extra pixels of image content on each side of a training patch.
    pub context: usize,
    pub pad_mode: PadMode,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            width: 64,
            pools: 3,
            depth: 6,
            features: 64,
            base_channels: 8,
            channels: None,
            in_channels: 1,
            context: 8,
            pad_mode: PadMode::Reflect,
        }
    }
}

/// One 3x3 conv of the trunk and the resolution level it runs at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub level: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl TrunkConfig {
    /// Total stride `2^P`.
    pub fn stride(&self) -> usize {
        1 << self.pools
    }

    /// Stride density `S = W / 2^P`, also the side of the final feature map.
    pub fn stride_density(&self) -> usize {
        self.width / self.stride()
    }

    pub fn final_side(&self) -> usize {
        self.stride_density()
    }

    /// Side of the network input: the patch plus context on both sides.
    pub fn input_side(&self) -> usize {
        self.width + 2 * self.context
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.features == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return bad("trunk extents must be positive".into());
        }
        if self.pools == 0 || self.pools > 16 {
            return bad(format!("pools must be in 1..=16, got {}", self.pools));
        }
        if self.width % self.stride() != 0 {
            return bad(format!("W = {} not divisible by 2^P = {}", self.width, self.stride()));
        }
        if self.context % self.stride() != 0 {
            return bad(format!("context {} not divisible by 2^P = {}", self.context, self.stride()));
        }
        if self.depth < self.pools + 1 {
            return bad(format!("depth {} needs at least one conv per level ({})", self.depth, self.pools + 1));
        }
        if let Some(ch) = &self.channels {
            if ch.len() != self.depth || ch.contains(&0) {
                return bad(format!("channel plan must list {} positive widths", self.depth));
            }
        }
        Ok(())
    }

    /// Conv layers per resolution level: one each, extra layers assigned to
    /// the deepest levels first.
    pub fn layer_plan(&self) -> Result<Vec<LayerPlan>> {
        self.validate()?;
        let levels = self.pools + 1;
        let mut per_level = vec![1usize; levels];
        let mut extra = self.depth - levels;
        let mut lvl = levels;
        while extra > 0 {
            lvl = if lvl == 0 { levels - 1 } else { lvl - 1 };
            per_level[lvl] += 1;
            extra -= 1;
        }
        let mut plan = Vec::with_capacity(self.depth);
        let mut c_in = self.in_channels;
        for (level, &count) in per_level.iter().enumerate() {
            for _ in 0..count {
                let out = match &self.channels {
                    Some(ch) => ch[plan.len()],
                    None => self.base_channels << level,
                };
                plan.push(LayerPlan { level, in_channels: c_in, out_channels: out });
                c_in = out;
            }
        }
        Ok(plan)
    }

    /// Channels of the refinement features, deepest first.
    pub fn feature_channels(&self) -> Result<Vec<usize>> {
        let plan = self.layer_plan()?;
        let mut out = vec![self.features];
        for level in (1..self.pools).rev() {
            let last = plan.iter().rev().find(|l| l.level == level).expect("every level has a conv");
            out.push(last.out_channels);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub cfg: TrunkConfig,
    pub convs: Vec<(usize, Conv)>,
    pub reduce: Conv,
}

/// Uncropped trunk activations: the last conv output of levels `1..P`
/// (index `l - 1`) and the reduced final map at level `P`.
pub struct TrunkMaps {
    pub levels: Vec<Var>,
    pub final_map: Var,
}

/// Trunk outputs cropped to the patch (context removed).
pub struct TrunkOutput {
    /// `[n, F, S, S]`.
    pub final_map: Var,
    /// Refinement features, deepest first; `features[0] == final_map`.
    pub features: Vec<Var>,
}

/// Builds the trunk parameters for `cfg`.
pub fn build_trunk(store: &mut ParamStore, cfg: &TrunkConfig, seed: u64) -> Result<Trunk> {
    let mut rng = rng::stream(seed, STREAM_TRUNK);
    let spec = ConvSpec::same3(cfg.pad_mode);
    let mut convs = Vec::new();
    for (i, l) in cfg.layer_plan()?.iter().enumerate() {
        let conv = Conv::new(store, &mut rng, &format!("trunk.conv{}", i), l.in_channels, l.out_channels, 3, spec)?;
        convs.push((l.level, conv));
    }
    let last = convs.last().map(|(_, c)| c.out_channels).expect("depth >= 1");
    let reduce = Conv::new(store, &mut rng, "trunk.reduce", last, cfg.features, 1, ConvSpec::VALID)?;
    Ok(Trunk { cfg: cfg.clone(), convs, reduce })
}

impl Trunk {
    /// Runs the trunk on an input of any size whose sides are multiples of
    /// `2^P`.
    pub fn forward_maps(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<TrunkMaps> {
        let (_, c, h, w) = g.value(x).dims4("trunk")?;
        let stride = self.cfg.stride();
        if c != self.cfg.in_channels || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return shape_err(
                "trunk",
                format!("input {:?} needs {} channels and sides divisible by {}", g.shape(x), self.cfg.in_channels, stride),
            );
        }
        let mut levels = Vec::with_capacity(self.cfg.pools);
        let mut level = 0;
        let mut h = x;
        for (l, conv) in &self.convs {
            while level < *l {
                if level > 0 {
                    levels.push(h);
                }
                h = g.maxpool2(h)?;
                level += 1;
            }
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        let f = self.reduce.forward(g, p, h)?;
        let final_map = g.relu(f)?;
        Ok(TrunkMaps { levels, final_map })
    }

    /// Crops the maps to the window whose top-left corner in map-input
    /// coordinates is `(y, x)`. Both must be multiples of `2^P`.
    pub fn crop_window(&self, g: &mut Graph, maps: &TrunkMaps, y: usize, x: usize) -> Result<TrunkOutput> {
        let stride = self.cfg.stride();
        if y % stride != 0 || x % stride != 0 {
            return shape_err("crop_window", format!("origin ({}, {}) not aligned to {}", y, x, stride));
        }
        let pools = self.cfg.pools;
        let side = self.cfg.width >> pools;
        let final_map = g.crop(maps.final_map, y >> pools, x >> pools, side, side)?;
        let mut features = vec![final_map];
        for level in (1..pools).rev() {
            let s = self.cfg.width >> level;
            features.push(g.crop(maps.levels[level - 1], y >> level, x >> level, s, s)?);
        }
        Ok(TrunkOutput { final_map, features })
    }

    /// Runs the trunk on a batch of patches with context and crops the
    /// context away.
    pub fn forward(&self, g: &mut Graph, p: &Bound, patch: Var) -> Result<TrunkOutput> {
        let side = self.cfg.input_side();
        let s = g.shape(patch);
        if s.len() != 4 || s[2] != side || s[3] != side {
            return shape_err("trunk", format!("patch {:?} must be {}x{} (W plus context)", s, side, side));
        }
        let maps = self.forward_maps(g, p, patch)?;
        let c = self.cfg.context;
        if c == 0 {
            let mut features = vec![maps.final_map];
            features.extend(maps.levels.iter().rev().copied());
            return Ok(TrunkOutput { final_map: maps.final_map, features });
        }
        self.crop_window(g, &maps, c, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
pub enum HeadVariant {
    /// Separate mask and score branches straight from the trunk.
    A,
    /// The reduced feature map is shared; the score has its own hidden layer.
    B,
    /// The score is a linear read-out of the mask branch's compact vector.
    C,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 3] = [HeadVariant::A, HeadVariant::B, HeadVariant::C];
}

impl core::str::FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(HeadVariant::A),
            "B" | "b" => Ok(HeadVariant::B),
            "C" | "c" => Ok(HeadVariant::C),
            other => Err(Error::Config(format!("unknown head variant {:?}", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Channels of the 1x1 reduction applied to the trunk output.
    pub reduce: usize,
    /// Width of the compact vector feeding the mask outputs.
    pub hidden: usize,
    /// Hidden width of the separate score branch (A and B).
    pub score_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { variant: HeadVariant::C, reduce: 16, hidden: 64, score_hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ScoreBranch {
    A { reduce: Conv, fc: Linear, out: Linear },
    B { fc: Linear, out: Linear },
    C { out: Linear },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub variant: HeadVariant,
    pub side: usize,
    mask_reduce: Conv,
    mask_fc: Linear,
    score: ScoreBranch,
}

pub struct HeadOutput {
    /// `[n, hidden]` compact mask vector.
    pub vector: Var,
    /// `[n, 1]`.
    pub score_logit: Var,
}

impl Head {
    pub fn build(store: &mut ParamStore, cfg: &HeadConfig, features: usize, side: usize, seed: u64) -> Result<Self> {
        if cfg.reduce == 0 || cfg.hidden == 0 || cfg.score_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        let mut rng = rng::stream(seed, STREAM_HEAD);
        let flat = cfg.reduce * side * side;
        let mask_reduce = Conv::new(store, &mut rng, "head.mask_reduce", features, cfg.reduce, 1, ConvSpec::VALID)?;
        let mask_fc = Linear::new(store, &mut rng, "head.mask_fc", flat, cfg.hidden)?;
        let score = match cfg.variant {
            HeadVariant::A => ScoreBranch::A {
                reduce: Conv::new(store, &mut rng, "head.score_reduce", features, cfg.reduce, 1, ConvSpec::VALID)?,
                fc: Linear::new(store, &mut rng, "head.score_fc", flat, cfg.score_hidden)?,
                out: Linear::new(store, &mut rng, "head.score_out", cfg.score_hidden, 1)?,
            },
            HeadVariant::B => ScoreBranch::B {
                fc: Linear::new(store, &mut rng, "head.score_fc", flat, cfg.score_hidden)?,
                out: Linear::new(store, &mut rng, "head.score_out", cfg.score_hidden, 1)?,
            },
            HeadVariant::C => ScoreBranch::C { out: Linear::new(store, &mut rng, "head.score_out", cfg.hidden, 1)? },
        };
        Ok(Self { variant: cfg.variant, side, mask_reduce, mask_fc, score })
    }

    /// Mask vector and score logit from the trunk output `[n, F, S, S]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, trunk: Var) -> Result<HeadOutput> {
        let s = g.shape(trunk);
        if s.len() != 4 || s[1] != self.mask_reduce.in_channels || s[2] != self.side || s[3] != self.side {
            return shape_err(
                "head",
                format!("trunk output {:?}, expected [n, {}, {}, {}]", s, self.mask_reduce.in_channels, self.side, self.side),
            );
        }
        let r = self.mask_reduce.forward(g, p, trunk)?;
        let r = g.relu(r)?;
        let v = self.mask_fc.forward(g, p, r)?;
        let vector = g.relu(v)?;
        let score_logit = match &self.score {
            ScoreBranch::A { reduce, fc, out } => {
                let s = reduce.forward(g, p, trunk)?;
                let s = g.relu(s)?;
                let s = fc.forward(g, p, s)?;
                let s = g.relu(s)?;
                out.forward(g, p, s)?
            }
            ScoreBranch::B { fc, out } => {
                let s = fc.forward(g, p, r)?;
                let s = g.relu(s)?;
                out.forward(g, p, s)?
            }
            ScoreBranch::C { out } => out.forward(g, p, vector)?,
        };
        Ok(HeadOutput { vector, score_logit })
    }

    pub fn param_count(&self) -> usize {
        let mask = self.mask_reduce.param_count() + self.mask_fc.param_count();
        mask + match &self.score {
            ScoreBranch::A { reduce, fc, out } => reduce.param_count() + fc.param_count() + out.param_count(),
            ScoreBranch::B { fc, out } => fc.param_count() + out.param_count(),
            ScoreBranch::C { out } => out.param_count(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.mask_fc.out_features
    }
}

/// Trunk, head, coarse output and refinement settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub head: HeadConfig,
    pub refinement: RefinementConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FeedforwardOnly,
    Refined,
}

#[derive(Clone, Debug, PartialEq)]
struct Refinement {
    encode: Linear,
    stack: RefinementStack,
}

/// The network: trunk, head and coarse mask layer, plus the mask-encoding
/// layer and refinement stack once refinement has been attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub trunk: Trunk,
    pub head: Head,
    coarse: Linear,
    refinement: Option<Refinement>,
}

/// Outputs of the feedforward pathway.
pub struct FeedforwardOutput {
    /// Coarse mask logits at trunk resolution, `[n, 1, S, S]`.
    pub coarse: Var,
    /// `M^1`, `[n, k_m, S, S]`, present once refinement is attached.
    pub encoding: Option<Var>,
    /// `[n, 1]`.
    pub score_logit: Var,
    /// Refinement features, deepest first.
    pub features: Vec<Var>,
}

/// Coarse and refined outputs from a single trunk evaluation.
pub struct DualOutput {
    /// `[n, 1, W, W]` probabilities from the coarse layer, upsampled.
    pub coarse: Var,
    /// `[n, 1, W, W]` probabilities from the refinement stack.
    pub refined: Var,
    /// `[n, 1]` probabilities.
    pub score: Var,
}

impl Model {
    /// A feedforward-only model (trunk, head and coarse mask layer).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let trunk = build_trunk(&mut params, &cfg.trunk, seed)?;
        let side = cfg.trunk.final_side();
        let head = Head::build(&mut params, &cfg.head, cfg.trunk.features, side, seed)?;
        let mut rng = rng::stream(seed, STREAM_HEAD + 1);
        let coarse = Linear::new(&mut params, &mut rng, "head.coarse", cfg.head.hidden, side * side)?;
        Ok(Self { cfg, seed, params, trunk, head, coarse, refinement: None })
    }

    /// A model with refinement attached, freshly initialized.
    pub fn new_refined(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(cfg, seed)?;
        m.attach_refinement()?;
        Ok(m)
    }

    /// Adds the mask-encoding layer and the refinement modules, initialized
    /// from the model seed. Existing parameters are untouched.
    pub fn attach_refinement(&mut self) -> Result<()> {
        if self.refinement.is_some() {
            return Err(Error::Config("refinement already attached".into()));
        }
        let mut rng = rng::stream(self.seed, STREAM_REFINE);
        let side = self.cfg.trunk.final_side();
        let channels = self.cfg.trunk.feature_channels()?;
        let stack_rng = &mut rng::stream(self.seed, STREAM_REFINE + 1);
        let stack = RefinementStack::build(
            &mut self.params,
            stack_rng,
            &self.cfg.refinement,
            &channels,
            self.cfg.trunk.pad_mode,
        )?;
        let k_m = stack.encoding_channels();
        let encode = Linear::new(&mut self.params, &mut rng, "refine.encode", self.head.hidden(), k_m * side * side)?;
        self.refinement = Some(Refinement { encode, stack });
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        if self.refinement.is_some() {
            Mode::Refined
        } else {
            Mode::FeedforwardOnly
        }
    }

    pub fn stack(&self) -> Option<&RefinementStack> {
        self.refinement.as_ref().map(|r| &r.stack)
    }

    pub fn input_side(&self) -> usize {
        self.cfg.trunk.input_side()
    }

    pub fn width(&self) -> usize {
        self.cfg.trunk.width
    }

    /// Binds every parameter; `trainable` selects those receiving gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, |_| false)
    }

    fn outputs_from_trunk(&self, g: &mut Graph, p: &Bound, trunk: TrunkOutput) -> Result<FeedforwardOutput> {
        let side = self.cfg.trunk.final_side();
        let head = self.head.forward(g, p, trunk.final_map)?;
        let n = g.shape(head.vector)[0];
        let c = self.coarse.forward(g, p, head.vector)?;
        let coarse = g.reshape(c, &[n, 1, side, side])?;
        let encoding = match &self.refinement {
            Some(r) => {
                let e = r.encode.forward(g, p, head.vector)?;
                Some(g.reshape(e, &[n, r.stack.encoding_channels(), side, side])?)
            }
            None => None,
        };
        Ok(FeedforwardOutput { coarse, encoding, score_logit: head.score_logit, features: trunk.features })
    }

    /// Trunk and head on a batch of patches `[n, C, W + 2c, W + 2c]`.
    pub fn forward_feedforward(&self, g: &mut Graph, p: &Bound, patch: Var) -> Result<FeedforwardOutput> {
        let trunk = self.trunk.forward(g, p, patch)?;
        self.outputs_from_trunk(g, p, trunk)
    }

    /// Coarse logits upsampled to `[n, 1, W, W]`.
    pub fn coarse_logits_full(&self, g: &mut Graph, coarse: Var) -> Result<Var> {
        let mut x = coarse;
        for _ in 0..self.cfg.trunk.pools {
            x = g.bilinear_up2(x)?;
        }
        Ok(x)
    }

    /// Refined mask logits `[n, 1, W, W]` from a feedforward output.
    pub fn refined_logits(&self, g: &mut Graph, p: &Bound, ff: &FeedforwardOutput) -> Result<Var> {
        let r = self.refinement.as_ref().ok_or_else(|| Error::Config("model has no refinement stage".into()))?;
        let m1 = ff.encoding.expect("encoding exists with refinement");
        r.stack.forward_logits(g, p, m1, &ff.features)
    }

    /// Refined mask and score probabilities.
    pub fn forward_refined(&self, g: &mut Graph, p: &Bound, patch: Var) -> Result<(Var, Var)> {
        let ff = self.forward_feedforward(g, p, patch)?;
        let logits = self.refined_logits(g, p, &ff)?;
        let mask = g.sigmoid(logits)?;
        let score = g.sigmoid(ff.score_logit)?;
        Ok((mask, score))
    }

    /// Coarse mask (upsampled to W) and score probabilities.
    pub fn forward_coarse(&self, g: &mut Graph, p: &Bound, patch: Var) -> Result<(Var, Var)> {
        let ff = self.forward_feedforward(g, p, patch)?;
        let logits = self.coarse_logits_full(g, ff.coarse)?;
        Ok((g.sigmoid(logits)?, g.sigmoid(ff.score_logit)?))
    }

    /// Both masks and the score from one trunk evaluation.
    pub fn forward_dual(&self, g: &mut Graph, p: &Bound, patch: Var) -> Result<DualOutput> {
        let ff = self.forward_feedforward(g, p, patch)?;
        let refined = self.refined_logits(g, p, &ff)?;
        let refined = g.sigmoid(refined)?;
        let coarse = self.coarse_logits_full(g, ff.coarse)?;
        let coarse = g.sigmoid(coarse)?;
        let score = g.sigmoid(ff.score_logit)?;
        Ok(DualOutput { coarse, refined, score })
    }
}

// ------------------------------------------------------------ inference

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Coarse,
    #[default]
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Number of highest-scoring windows that get masks.
    pub top_n: usize,
    /// Smallest object side the caller wants covered; the image should be
    /// scaled by `canonical / min_object_size` before single-scale inference.
    pub min_object_size: usize,
    /// Windows whose score probability is below this are dropped.
    pub score_threshold: f64,
    /// Window stride; defaults to `2^P`.
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub mode: MaskMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { top_n: 10, min_object_size: 32, score_threshold: 0.0, stride: None, mode: MaskMode::Refined }
    }
}

impl InferenceConfig {
    /// Image scale factor that brings objects of `min_object_size` to the
    /// `canonical` object size the model was trained on.
    pub fn scale_factor(&self, canonical: f64) -> f64 {
        canonical / self.min_object_size.max(1) as f64
    }
}

/// One scored window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Window origin in image coordinates.
    pub x: usize,
    pub y: usize,
    pub score: f64,
    /// `W x W` object probabilities, row-major.
    pub mask: Vec<f64>,
}

/// Reflect-pads every plane of `[n, c, h, w]` by `top/left` and
/// `bottom/right` pixels.
pub fn reflect_pad(t: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4("reflect_pad")?;
    if top.max(bottom) >= h || left.max(right) >= w {
        return shape_err("reflect_pad", format!("pad too large for {}x{}", h, w));
    }
    let (ho, wo) = (h + top + bottom, w + left + right);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in t.data().chunks_exact(h * w) {
        for y in 0..ho {
            let sy = crate::kernels::pad_index(y as isize - top as isize, h, PadMode::Reflect).expect("checked");
            for x in 0..wo {
                let sx = crate::kernels::pad_index(x as isize - left as isize, w, PadMode::Reflect).expect("checked");
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Sliding-window origins `(y, x)` for an `h x w` image, row-major.
pub fn window_origins(h: usize, w: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if h < window || w < window || stride == 0 {
        return out;
    }
    for y in (0..=h - window).step_by(stride) {
        for x in (0..=w - window).step_by(stride) {
            out.push((y, x));
        }
    }
    out
}

/// Indices of the `k` largest scores, ties broken by lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-window trunk outputs as plain tensors.
struct WindowFeatures {
    final_maps: Vec<Tensor>,
    /// `features[level_idx][window]`, deepest first.
    features: Vec<Vec<Tensor>>,
}

impl Model {
    /// Trunk features for every window. When the stride is a multiple of
    /// `2^P`, the trunk runs once over the whole (padded) image and windows
    /// are cropped from the shared maps; otherwise each window is evaluated
    /// on its own crop.
    fn window_features(&self, image: &Tensor, origins: &[(usize, usize)], stride: usize) -> Result<WindowFeatures> {
        let cfg = &self.cfg.trunk;
        let (_, _, h, w) = image.dims4("propose")?;
        let c = cfg.context;
        let s = cfg.stride();
        let n_levels = cfg.pools;
        let mut final_maps = Vec::with_capacity(origins.len());
        let mut features: Vec<Vec<Tensor>> = vec![Vec::with_capacity(origins.len()); n_levels];
        let pad_b = c + (s - (h + 2 * c) % s) % s;
        let pad_r = c + (s - (w + 2 * c) % s) % s;
        let padded = if c == 0 && pad_b == 0 && pad_r == 0 { image.clone() } else { reflect_pad(image, c, pad_b, c, pad_r)? };
        if stride % s == 0 {
            let mut g = Graph::new();
            let p = self.bind_frozen(&mut g);
            let x = g.input(padded);
            let maps = self.trunk.forward_maps(&mut g, &p, x)?;
            for &(y, x) in origins {
                let out = self.trunk.crop_window(&mut g, &maps, y + c, x + c)?;
                final_maps.push(g.value(out.final_map).clone());
                for (slot, f) in features.iter_mut().zip(&out.features) {
                    slot.push(g.value(*f).clone());
                }
            }
        } else {
            let side = cfg.input_side();
            for &(y, x) in origins {
                let crop = padded.crop(y, x, side, side)?;
                let mut g = Graph::new();
                let p = self.bind_frozen(&mut g);
                let xv = g.input(crop);
                let out = self.trunk.forward(&mut g, &p, xv)?;
                final_maps.push(g.value(out.final_map).clone());
                for (slot, f) in features.iter_mut().zip(&out.features) {
                    slot.push(g.value(*f).clone());
                }
            }
        }
        Ok(WindowFeatures { final_maps, features })
    }

    /// Scores every `W x W` window of `image` (`[1, C, H, W]`), keeps the
    /// `top_n` best and computes masks for that batch only.
    pub fn propose(&self, image: &Tensor, cfg: &InferenceConfig) -> Result<Vec<Proposal>> {
        let (n, c, h, w) = image.dims4("propose")?;
        let win = self.width();
        if n != 1 || c != self.cfg.trunk.in_channels {
            return shape_err("propose", format!("image {:?} must be [1, {}, H, W]", image.shape(), self.cfg.trunk.in_channels));
        }
        if h < win || w < win {
            return Err(Error::Input(format!("image {}x{} smaller than the {}x{} window", h, w, win, win)));
        }
        if cfg.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        if cfg.mode == MaskMode::Refined && self.refinement.is_none() {
            return Err(Error::Config("refined proposals need a model with refinement".into()));
        }
        let stride = cfg.stride.unwrap_or(self.cfg.trunk.stride());
        let origins = window_origins(h, w, win, stride);
        let feats = self.window_features(image, &origins, stride)?;

        // score every window through the head only
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let batch = g.input(Tensor::stack(&feats.final_maps)?);
        let head = self.head.forward(&mut g, &p, batch)?;
        let score = g.sigmoid(head.score_logit)?;
        let scores: Vec<f64> = g.value(score).data().to_vec();
        let mut chosen = top_k_indices(&scores, cfg.top_n);
        chosen.retain(|&i| scores[i] >= cfg.score_threshold);
        if chosen.is_empty() {
            return Ok(Vec::new());
        }

        // masks for the chosen batch
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let pick = |ts: &Vec<Tensor>| Tensor::stack(&chosen.iter().map(|&i| ts[i].clone()).collect::<Vec<_>>());
        let features: Vec<Var> = feats.features.iter().map(|lv| pick(lv).map(|t| g.input(t))).collect::<Result<_>>()?;
        let trunk = TrunkOutput { final_map: features[0], features };
        let ff = self.outputs_from_trunk(&mut g, &p, trunk)?;
        let logits = match cfg.mode {
            MaskMode::Refined => self.refined_logits(&mut g, &p, &ff)?,
            MaskMode::Coarse => self.coarse_logits_full(&mut g, ff.coarse)?,
        };
        let masks = g.sigmoid(logits)?;
        let masks = g.value(masks);
        Ok(chosen
            .iter()
            .enumerate()
            .map(|(k, &i)| Proposal {
                x: origins[i].1,
                y: origins[i].0,
                score: scores[i],
                mask: masks.data()[k * win * win..(k + 1) * win * win].to_vec(),
            })
            .collect())
    }

    /// Number of windows [`propose`](Self::propose) evaluates.
    pub fn window_count(&self, h: usize, w: usize, cfg: &InferenceConfig) -> usize {
        let stride = cfg.stride.unwrap_or(self.cfg.trunk.stride());
        window_origins(h, w, self.width(), stride).len()
    }
}
