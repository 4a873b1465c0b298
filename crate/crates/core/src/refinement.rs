//! Top-down refinement: modules that merge a mask encoding with skip
//! features computed from the matching bottom-up layer and double the
//! spatial resolution.
//!
//! Stage `i` (0-based here) runs at `side * 2^i`, where `side` is the trunk's
//! final spatial extent, and consumes features of that resolution. Stages
//! are applied deepest first; after `n` stages the encoding has the input
//! patch resolution and a single channel, which is read as a logit map.
//!
//! Each stage computes
//!
//! ```text
//! S      = relu(skip_b(relu(skip_a(F))))          k_f -> hidden -> k_s
//! M_next = up2(relu(merge(concat(M, S))))          k_m + k_s -> k_m_next
//! ```
//!
//! with the ReLU dropped on the last stage so its output stays a logit.
//! [`RefactoredRefinementModule`] computes the same map with the merge
//! convolution split into a mask-path and a skip-path convolution whose
//! outputs are added.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{ConvSpec, Graph, PadMode, Var};
use crate::layers::Conv;
use crate::param::{Bound, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleVariant {
    /// `k_m = k_s = k` at every stage.
    Constant,
    /// `k_m = k_s = k / 2^i` at stage `i` (0-based).
    Halving,
}

/// Mask-encoding and skip widths per stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    k_m: Vec<usize>,
    k_s: Vec<usize>,
    variant: ScheduleVariant,
}

pub fn make_schedule(k: usize, variant: ScheduleVariant, n: usize) -> Result<ChannelSchedule> {
    if k == 0 {
        return Err(Error::Config("schedule base width must be at least 1".into()));
    }
    let widths: Vec<usize> = match variant {
        ScheduleVariant::Constant => (0..n).map(|_| k).collect(),
        ScheduleVariant::Halving => {
            if n > 0 && k % (1usize << (n - 1)) != 0 {
                return Err(Error::Config(format!(
                    "halving schedule needs k divisible by 2^(n-1) = {}, got k = {}",
                    1usize << (n - 1),
                    k
                )));
            }
            (0..n).map(|i| k >> i).collect()
        }
    };
    Ok(ChannelSchedule { k_m: widths.clone(), k_s: widths, variant })
}

impl ChannelSchedule {
    pub fn stages(&self) -> usize {
        self.k_m.len()
    }

    pub fn mask_widths(&self) -> &[usize] {
        &self.k_m
    }

    pub fn skip_widths(&self) -> &[usize] {
        &self.k_s
    }

    pub fn variant(&self) -> ScheduleVariant {
        self.variant
    }

    /// Channels of the encoding produced by stage `i`; 1 after the last.
    pub fn output_width(&self, i: usize) -> usize {
        self.k_m.get(i + 1).copied().unwrap_or(1)
    }

    /// Channels of the initial mask encoding `M^1`.
    pub fn input_width(&self) -> usize {
        self.k_m.first().copied().unwrap_or(1)
    }
}

/// Which connections of the refinement stack exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StackKind {
    /// Skip path and mask path.
    #[default]
    Full,
    /// No mask-path convolutions; `k_m = k_s = 1` and the output is the
    /// average of every upsampled stage output.
    SkipOnly,
    /// Mask-path convolutions only; skip features are replaced by zeros.
    NoHorizontal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    /// Base width `k` of the channel schedule.
    pub k: usize,
    pub schedule: ScheduleVariant,
    /// Width of the intermediate skip convolution.
    pub skip_hidden: usize,
    #[serde(default)]
    pub kind: StackKind,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self { k: 16, schedule: ScheduleVariant::Halving, skip_hidden: 64, kind: StackKind::Full }
    }
}

/// Parameters of one refinement stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementModule {
    pub stage: usize,
    pub feature_channels: usize,
    pub mask_channels: usize,
    pub skip_channels: usize,
    pub out_channels: usize,
    pub skip_a: Option<Conv>,
    pub skip_b: Option<Conv>,
    pub merge: Option<Conv>,
    /// The last stage emits logits and skips the ReLU.
    pub last: bool,
}

/// The same stage with the merge convolution split by input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RefactoredRefinementModule {
    pub stage: usize,
    pub skip_a: Conv,
    pub skip_b: Conv,
    pub mask_conv: Conv,
    pub skip_merge_conv: Conv,
    pub last: bool,
}

fn missing(what: &str, stage: usize) -> Error {
    Error::Config(format!("refinement stage {} has no {}", stage, what))
}

impl RefinementModule {
    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        stage: usize,
        kind: StackKind,
        feature_channels: usize,
        skip_hidden: usize,
        mask_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        last: bool,
        mode: PadMode,
    ) -> Result<Self> {
        let spec = ConvSpec::same3(mode);
        let prefix = format!("refine.{}", stage);
        let (skip_a, skip_b) = if kind == StackKind::NoHorizontal {
            (None, None)
        } else {
            let a = Conv::new(store, rng, &format!("{}.skip_a", prefix), feature_channels, skip_hidden, 3, spec)?;
            let b = Conv::new(store, rng, &format!("{}.skip_b", prefix), skip_hidden, skip_channels, 3, spec)?;
            (Some(a), Some(b))
        };
        let merge = if kind == StackKind::SkipOnly {
            None
        } else {
            let merge_in = mask_channels + skip_channels;
            let m = Conv::new(store, rng, &format!("{}.merge", prefix), merge_in, out_channels, 3, spec)?;
            if m.in_channels != mask_channels + skip_channels {
                return Err(Error::Config(format!("stage {} merge channel bookkeeping", stage)));
            }
            Some(m)
        };
        Ok(Self {
            stage,
            feature_channels,
            mask_channels,
            skip_channels,
            out_channels,
            skip_a,
            skip_b,
            merge,
            last,
        })
    }
}

/// `S = relu(skip_b(relu(skip_a(F))))`; spatial extent preserved.
pub fn make_skip(g: &mut Graph, p: &Bound, features: Var, module: &RefinementModule) -> Result<Var> {
    let a = module.skip_a.as_ref().ok_or_else(|| missing("skip path", module.stage))?;
    let b = module.skip_b.as_ref().ok_or_else(|| missing("skip path", module.stage))?;
    skip_path(g, p, features, a, b)
}

fn skip_path(g: &mut Graph, p: &Bound, features: Var, a: &Conv, b: &Conv) -> Result<Var> {
    let c = g.shape(features).get(1).copied().unwrap_or(0);
    if c != a.in_channels {
        return shape_err("make_skip", format!("features have {} channels, skip conv expects {}", c, a.in_channels));
    }
    let h = a.forward(g, p, features)?;
    let h = g.relu(h)?;
    let s = b.forward(g, p, h)?;
    g.relu(s)
}

fn check_pair(g: &Graph, mask: Var, skip: Var) -> Result<()> {
    let (ms, ss) = (g.shape(mask), g.shape(skip));
    if ms.len() != 4 || ss.len() != 4 || ms[0] != ss[0] || ms[2..] != ss[2..] {
        return shape_err("refine", format!("mask {:?} and skip {:?} must share batch and spatial extent", ms, ss));
    }
    Ok(())
}

/// `up2(relu(merge(concat(M, S))))`, without the ReLU on the last stage.
pub fn refine(g: &mut Graph, p: &Bound, mask: Var, skip: Var, module: &RefinementModule) -> Result<Var> {
    check_pair(g, mask, skip)?;
    let merge = module.merge.as_ref().ok_or_else(|| missing("merge conv", module.stage))?;
    let x = g.concat_channels(mask, skip)?;
    let y = merge.forward(g, p, x)?;
    let y = if module.last { y } else { g.relu(y)? };
    g.bilinear_up2(y)
}

/// `up2(relu(mask_conv(M) + skip_merge_conv(S)))`, without the ReLU on the
/// last stage.
pub fn refine_refactored(
    g: &mut Graph,
    p: &Bound,
    mask: Var,
    skip: Var,
    module: &RefactoredRefinementModule,
) -> Result<Var> {
    check_pair(g, mask, skip)?;
    let a = module.mask_conv.forward(g, p, mask)?;
    let b = module.skip_merge_conv.forward(g, p, skip)?;
    let y = g.add(a, b)?;
    let y = if module.last { y } else { g.relu(y)? };
    g.bilinear_up2(y)
}

/// Skip features for the refactored form.
pub fn make_skip_refactored(g: &mut Graph, p: &Bound, features: Var, module: &RefactoredRefinementModule) -> Result<Var> {
    skip_path(g, p, features, &module.skip_a, &module.skip_b)
}

/// Converts a full refinement module into the refactored form. The merge
/// kernel `[out, k_m + k_s, 3, 3]` is split along its input channels; the
/// mask-path conv keeps the bias and the skip-path conv gets a zero bias.
/// Parameters are written to `dst` under `{prefix}.{skip_a|skip_b|mask|skip_merge}`.
pub fn refactor_module(
    module: &RefinementModule,
    src: &ParamStore,
    dst: &mut ParamStore,
    prefix: &str,
) -> Result<RefactoredRefinementModule> {
    let merge = module.merge.ok_or_else(|| missing("merge conv", module.stage))?;
    let skip_a = module.skip_a.ok_or_else(|| missing("skip path", module.stage))?;
    let skip_b = module.skip_b.ok_or_else(|| missing("skip path", module.stage))?;
    let copy = |dst: &mut ParamStore, name: &str, conv: &Conv| -> Result<Conv> {
        let weight = dst.add(&format!("{}.{}.weight", prefix, name), src.get(conv.weight).clone())?;
        let bias = dst.add(&format!("{}.{}.bias", prefix, name), src.get(conv.bias).clone())?;
        Ok(Conv { weight, bias, ..*conv })
    };
    let skip_a = copy(dst, "skip_a", &skip_a)?;
    let skip_b = copy(dst, "skip_b", &skip_b)?;

    let w = src.get(merge.weight);
    let (cout, cin, kh, kw) = w.dims4("refactor_module")?;
    let (km, ks) = (module.mask_channels, module.skip_channels);
    if cin != km + ks {
        return shape_err("refactor_module", format!("merge has {} inputs, expected {} + {}", cin, km, ks));
    }
    let per = kh * kw;
    let mut wm = Vec::with_capacity(cout * km * per);
    let mut ws = Vec::with_capacity(cout * ks * per);
    for kernel in w.data().chunks_exact(cin * per) {
        wm.extend_from_slice(&kernel[..km * per]);
        ws.extend_from_slice(&kernel[km * per..]);
    }
    let mask_conv = Conv {
        weight: dst.add(&format!("{}.mask.weight", prefix), Tensor::new(&[cout, km, kh, kw], wm)?)?,
        bias: dst.add(&format!("{}.mask.bias", prefix), src.get(merge.bias).clone())?,
        in_channels: km,
        ..merge
    };
    let skip_merge_conv = Conv {
        weight: dst.add(&format!("{}.skip_merge.weight", prefix), Tensor::new(&[cout, ks, kh, kw], ws)?)?,
        bias: dst.add(&format!("{}.skip_merge.bias", prefix), Tensor::zeros(&[cout]))?,
        in_channels: ks,
        ..merge
    };
    Ok(RefactoredRefinementModule { stage: module.stage, skip_a, skip_b, mask_conv, skip_merge_conv, last: module.last })
}

/// The full top-down pathway: one module per pooling stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementStack {
    pub kind: StackKind,
    pub schedule: ChannelSchedule,
    pub modules: Vec<RefinementModule>,
}

impl RefinementStack {
    /// Builds one module per entry of `feature_channels`, which lists the
    /// channel counts of the bottom-up features deepest first.
    pub fn build(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        cfg: &RefinementConfig,
        feature_channels: &[usize],
        mode: PadMode,
    ) -> Result<Self> {
        let n = feature_channels.len();
        let schedule = match cfg.kind {
            StackKind::SkipOnly => make_schedule(1, ScheduleVariant::Constant, n)?,
            _ => make_schedule(cfg.k, cfg.schedule, n)?,
        };
        if cfg.skip_hidden == 0 {
            return Err(Error::Config("skip_hidden must be at least 1".into()));
        }
        let mut modules = Vec::with_capacity(n);
        for (i, &kf) in feature_channels.iter().enumerate() {
            modules.push(RefinementModule::build(
                store,
                rng,
                i,
                cfg.kind,
                kf,
                cfg.skip_hidden,
                schedule.k_m[i],
                schedule.k_s[i],
                schedule.output_width(i),
                i + 1 == n,
                mode,
            )?);
        }
        Ok(Self { kind: cfg.kind, schedule, modules })
    }

    pub fn stages(&self) -> usize {
        self.modules.len()
    }

    /// Channels expected in the initial mask encoding.
    pub fn encoding_channels(&self) -> usize {
        self.schedule.input_width()
    }

    fn check_inputs(&self, g: &Graph, m1: Var, features: &[Var]) -> Result<()> {
        if features.len() != self.modules.len() {
            return shape_err(
                "stack_refine",
                format!("{} feature maps for {} refinement stages", features.len(), self.modules.len()),
            );
        }
        let ms = g.shape(m1);
        if ms.len() != 4 || ms[1] != self.encoding_channels() {
            return shape_err(
                "stack_refine",
                format!("mask encoding {:?} needs {} channels", ms, self.encoding_channels()),
            );
        }
        let (n, side_h, side_w) = (ms[0], ms[2], ms[3]);
        for (i, (&f, m)) in features.iter().zip(&self.modules).enumerate() {
            let fs = g.shape(f);
            let expect = [n, m.feature_channels, side_h << i, side_w << i];
            if fs != expect {
                return shape_err("stack_refine", format!("feature {} has shape {:?}, expected {:?}", i, fs, expect));
            }
        }
        Ok(())
    }

    /// Output logits `[n, 1, H, W]` at `2^stages` times the encoding side.
    pub fn forward_logits(&self, g: &mut Graph, p: &Bound, m1: Var, features: &[Var]) -> Result<Var> {
        self.check_inputs(g, m1, features)?;
        match self.kind {
            StackKind::Full => {
                let mut m = m1;
                for (module, &f) in self.modules.iter().zip(features) {
                    let s = make_skip(g, p, f, module)?;
                    m = refine(g, p, m, s, module)?;
                }
                Ok(m)
            }
            StackKind::NoHorizontal => {
                let mut m = m1;
                for (module, &f) in self.modules.iter().zip(features) {
                    let mut shape = g.shape(f).to_vec();
                    shape[1] = module.skip_channels;
                    let zeros = g.input(Tensor::zeros(&shape));
                    m = refine(g, p, m, zeros, module)?;
                }
                Ok(m)
            }
            StackKind::SkipOnly => {
                let n = self.modules.len();
                let mut acc = upsample_times(g, m1, n)?;
                for (i, (module, &f)) in self.modules.iter().zip(features).enumerate() {
                    let s = make_skip(g, p, f, module)?;
                    let s = upsample_times(g, s, n - i)?;
                    acc = g.add(acc, s)?;
                }
                g.scale(acc, 1.0 / (n + 1) as f64)
            }
        }
    }
}

fn upsample_times(g: &mut Graph, mut x: Var, times: usize) -> Result<Var> {
    for _ in 0..times {
        x = g.bilinear_up2(x)?;
    }
    Ok(x)
}

/// Runs the whole stack and squashes the final map with a sigmoid, giving a
/// per-pixel object probability. With zero stages this is `sigmoid(M^1)`.
pub fn stack_refine(g: &mut Graph, p: &Bound, stack: &RefinementStack, m1: Var, features: &[Var]) -> Result<Var> {
    let logits = stack.forward_logits(g, p, m1, features)?;
    g.sigmoid(logits)
}

fn expect_kind(stack: &RefinementStack, kind: StackKind) -> Result<()> {
    if stack.kind != kind {
        return Err(Error::Config(format!("expected a {:?} stack, got {:?}", kind, stack.kind)));
    }
    Ok(())
}

/// Skip-only ablation: no mask-path convolutions, averaged stage outputs.
pub fn ablation_skip_only(g: &mut Graph, p: &Bound, stack: &RefinementStack, m1: Var, features: &[Var]) -> Result<Var> {
    expect_kind(stack, StackKind::SkipOnly)?;
    stack_refine(g, p, stack, m1, features)
}

/// Mask-path-only ablation: skip contributions are zero.
pub fn ablation_no_horizontal(
    g: &mut Graph,
    p: &Bound,
    stack: &RefinementStack,
    m1: Var,
    features: &[Var],
) -> Result<Var> {
    expect_kind(stack, StackKind::NoHorizontal)?;
    stack_refine(g, p, stack, m1, features)
}
