//! Two-stage training: coarse mask and score jointly, then the refinement
//! stack on top of a frozen feedforward network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::metrics::{self, BinaryMask, IOU_THRESHOLDS};
use crate::network::{MaskMode, Mode, Model};
use crate::rng;
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Parameters trained in stage 2; everything else is frozen.
pub fn is_refinement_param(name: &str) -> bool {
    name.starts_with("refine.")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Weight of the score loss.
    pub lambda: f64,
    pub seed: u64,
    /// A batch loss above this multiple of the first batch loss counts as
    /// divergence.
    pub divergence_factor: f64,
    /// Evaluate on the validation split after every epoch.
    pub validate_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_stage1: 0.02,
            lr_stage2: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            epochs_stage1: 6,
            epochs_stage2: 4,
            lambda: 1.0 / 32.0,
            seed: 0,
            divergence_factor: 1e3,
            validate_every_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub mean_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: u8,
    pub epoch: usize,
    /// Mean batch loss of each finished epoch.
    pub epoch_losses: Vec<f64>,
    /// Names of parameters that received no updates.
    pub frozen: Vec<String>,
    pub log: Vec<EpochRecord>,
}

/// Joint loss on mask logits `[n, 1, W, W]` and score logits `[n, 1]`:
/// mean per-pixel cross-entropy over the positives' masks plus `lambda`
/// times the mean score cross-entropy over every sample. Labels are `+1` /
/// `-1`; positives must carry a mask.
pub fn loss_joint(
    g: &mut Graph,
    mask_logits: Var,
    masks: &[Option<&BinaryMask>],
    score_logits: Var,
    labels: &[i8],
    lambda: f64,
) -> Result<Var> {
    let n = labels.len();
    let shape = g.shape(mask_logits).to_vec();
    if shape.len() != 4 || shape[0] != n || shape[1] != 1 || masks.len() != n || g.shape(score_logits) != [n, 1] {
        return Err(Error::Shape {
            op: "loss_joint",
            detail: format!("mask {:?}, score {:?}, {} labels, {} masks", shape, g.shape(score_logits), n, masks.len()),
        });
    }
    let pix = shape[2] * shape[3];
    let mut target = vec![0.0; n * pix];
    let mut weight = vec![0.0; n * pix];
    let mut positives = 0usize;
    for (i, (&y, m)) in labels.iter().zip(masks).enumerate() {
        if y <= 0 {
            continue;
        }
        let m = m.ok_or_else(|| Error::Input(format!("positive sample {} has no mask", i)))?;
        if m.width() != shape[3] || m.height() != shape[2] {
            return Err(Error::Shape { op: "loss_joint", detail: format!("mask {}x{} vs {:?}", m.width(), m.height(), shape) });
        }
        positives += 1;
        for (k, &b) in m.bits().iter().enumerate() {
            target[i * pix + k] = if b { 1.0 } else { 0.0 };
            weight[i * pix + k] = 1.0;
        }
    }
    let score_t: Vec<f64> = labels.iter().map(|&y| if y > 0 { 1.0 } else { 0.0 }).collect();
    let score = g.bce_with_logits(score_logits, &score_t, &vec![1.0; n], n as f64)?;
    let score = g.scale(score, lambda)?;
    if positives == 0 {
        return Ok(score);
    }
    let mask = g.bce_with_logits(mask_logits, &target, &weight, (positives * pix) as f64)?;
    g.add(mask, score)
}

/// Plain SGD with momentum: `v <- mu v + grad; p <- p - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, n_params: usize) -> Self {
        Self { lr, momentum, velocity: vec![None; n_params] }
    }

    /// Applies the gradients of `vars` (one per parameter, store order).
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, model: &mut Model, g: &Graph, vars: &[Var]) {
        let ids: Vec<_> = model.params.ids().collect();
        for (k, (&id, &v)) in ids.iter().zip(vars).enumerate() {
            let Some(grad) = g.grad(v) else { continue };
            let vel = self.velocity[k].get_or_insert_with(|| vec![0.0; grad.len()]);
            let p = model.params.get_mut(id).data_mut();
            for ((p, v), &d) in p.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + d;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Stacks the patches of `samples[idx]` into `[n, C, S, S]`.
pub fn batch_patches(samples: &[Sample], idx: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = idx
        .iter()
        .map(|&i| {
            let p = &samples[i].patch;
            let mut shape = vec![1];
            shape.extend_from_slice(p.shape());
            p.clone().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}

fn stage_logits(model: &Model, g: &mut Graph, p: &crate::param::Bound, x: Var, stage: u8) -> Result<(Var, Var)> {
    let ff = model.forward_feedforward(g, p, x)?;
    let logits = if stage == 1 { model.coarse_logits_full(g, ff.coarse)? } else { model.refined_logits(g, p, &ff)? };
    Ok((logits, ff.score_logit))
}

fn batch_loss(model: &Model, samples: &[Sample], idx: &[usize], stage: u8, lambda: f64, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<(Var, Vec<Var>)> {
    let p = model.bind(g, trainable);
    let x = g.input(batch_patches(samples, idx)?);
    let (logits, score) = stage_logits(model, g, &p, x, stage)?;
    let masks: Vec<Option<&BinaryMask>> = idx.iter().map(|&i| samples[i].mask.as_ref()).collect();
    let labels: Vec<i8> = idx.iter().map(|&i| samples[i].label).collect();
    let loss = loss_joint(g, logits, &masks, score, &labels, lambda)?;
    Ok((loss, p.vars().to_vec()))
}

/// Mean joint loss over `samples` with the stage's mask path, no gradients.
pub fn evaluate_loss(model: &Model, samples: &[Sample], stage: u8, lambda: f64, batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let (loss, _) = batch_loss(model, samples, chunk, stage, lambda, &mut g, |_| false)?;
        total += g.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn run_stage(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig, stage: u8) -> Result<TrainState> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let (lr, epochs) = if stage == 1 { (cfg.lr_stage1, cfg.epochs_stage1) } else { (cfg.lr_stage2, cfg.epochs_stage2) };
    let trainable = move |name: &str| if stage == 1 { !is_refinement_param(name) } else { is_refinement_param(name) };
    let frozen: Vec<String> = model.params.iter().map(|(n, _)| n).filter(|n| !trainable(n)).map(String::from).collect();
    let mut sgd = Sgd::new(lr, cfg.momentum, model.params.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, rng::tags::SHUFFLE * 16 + stage as u64);
    let mut state = TrainState { stage, epoch: 0, epoch_losses: Vec::new(), frozen, log: Vec::new() };
    let mut reference: Option<f64> = None;
    let mut step = 0usize;
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let (loss, vars) = batch_loss(model, train, chunk, stage, cfg.lambda, &mut g, trainable)?;
            let value = g.value(loss).data()[0];
            let limit = reference.map_or(f64::INFINITY, |r| r * cfg.divergence_factor);
            if !value.is_finite() || value > limit {
                return Err(Error::Diverged { stage, epoch, step, loss: value });
            }
            reference.get_or_insert(value);
            g.backward(loss).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { stage, epoch, step, loss: value },
                other => other,
            })?;
            sgd.step(model, &g, &vars);
            sum += value * chunk.len() as f64;
            step += 1;
        }
        let mean = sum / train.len() as f64;
        state.epoch_losses.push(mean);
        state.epoch = epoch + 1;
        state.log.push(EpochRecord { stage, epoch, split: "train".into(), loss: mean, mean_iou: None });
        if cfg.validate_every_epoch && !val.is_empty() {
            let mode = if stage == 1 { MaskMode::Coarse } else { MaskMode::Refined };
            let ev = evaluate(model, val, mode, cfg.batch_size)?;
            let loss = evaluate_loss(model, val, stage, cfg.lambda, cfg.batch_size)?;
            state.log.push(EpochRecord { stage, epoch, split: "val".into(), loss, mean_iou: ev.mean_iou });
        }
    }
    if !model.params.iter().all(|(_, t)| t.is_finite()) {
        return Err(Error::Diverged { stage, epoch: epochs, step, loss: f64::NAN });
    }
    Ok(state)
}

/// Stage 1: trunk, head and coarse mask layer trained jointly. The model
/// must not have refinement attached yet.
pub fn train_stage1(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainState> {
    if model.mode() != Mode::FeedforwardOnly {
        return Err(Error::Config("stage 1 expects a feedforward-only model".into()));
    }
    run_stage(model, train, val, cfg, 1)
}

/// Stage 2: attaches refinement if needed and trains only `refine.*`
/// parameters; everything else is bitwise unchanged.
pub fn train_stage2(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainState> {
    if model.mode() == Mode::FeedforwardOnly {
        model.attach_refinement()?;
    }
    run_stage(model, train, val, cfg, 2)
}

/// Coarse mask, refined mask and score probabilities of one patch
/// `[C, S, S]` from a single trunk evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPrediction {
    pub coarse: Tensor,
    pub refined: Tensor,
    pub score: f64,
    /// Max-pool ops executed; equals `P` when the trunk ran once.
    pub pool_ops: usize,
}

pub fn dual_inference(model: &Model, patch: &Tensor) -> Result<DualPrediction> {
    if model.mode() != Mode::Refined {
        return Err(Error::Config("dual inference needs a model with refinement".into()));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(patch.shape());
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let x = g.input(patch.clone().reshape(&shape)?);
    let out = model.forward_dual(&mut g, &p, x)?;
    let w = model.width();
    Ok(DualPrediction {
        coarse: g.value(out.coarse).clone().reshape(&[w, w])?,
        refined: g.value(out.refined).clone().reshape(&[w, w])?,
        score: g.value(out.score).data()[0],
        pool_ops: g.count_ops(OpKind::MaxPool2),
    })
}

/// Mask probabilities `[W, W]` and score logit for each sample.
pub fn predict(model: &Model, samples: &[Sample], mode: MaskMode, batch: usize) -> Result<Vec<(Tensor, f64)>> {
    if mode == MaskMode::Refined && model.mode() != Mode::Refined {
        return Err(Error::Config("refined predictions need a model with refinement".into()));
    }
    let w = model.width();
    let stage = if mode == MaskMode::Coarse { 1 } else { 2 };
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let x = g.input(batch_patches(samples, chunk)?);
        let (logits, score) = stage_logits(model, &mut g, &p, x, stage)?;
        let probs = g.sigmoid(logits)?;
        let probs = g.value(probs).data();
        let scores = g.value(score).data();
        for k in 0..chunk.len() {
            let m = Tensor::new(&[w, w], probs[k * w * w..(k + 1) * w * w].to_vec())?;
            out.push((m, scores[k]));
        }
    }
    Ok(out)
}

/// Patch-level quality on a labeled split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEval {
    /// Mean IoU of the binarized mask against the target, over positives.
    pub mean_iou: Option<f64>,
    /// Average recall with one proposal per positive (AR at 10 thresholds).
    pub ar: Option<f64>,
    /// Fraction of samples whose score logit has the label's sign.
    pub score_accuracy: f64,
    pub positives: usize,
}

/// Evaluates masks (binarized at the default threshold) and scores.
pub fn evaluate(model: &Model, samples: &[Sample], mode: MaskMode, batch: usize) -> Result<PatchEval> {
    let preds = predict(model, samples, mode, batch)?;
    evaluate_predictions(samples, &preds, metrics::DEFAULT_BINARIZE_THRESHOLD)
}

pub fn evaluate_predictions(samples: &[Sample], preds: &[(Tensor, f64)], threshold: f64) -> Result<PatchEval> {
    if samples.len() != preds.len() || samples.is_empty() {
        return Err(Error::Input("predictions do not match samples".into()));
    }
    let mut ious = Vec::new();
    let mut correct = 0usize;
    for (s, (mask, logit)) in samples.iter().zip(preds) {
        if (*logit > 0.0) == s.is_positive() {
            correct += 1;
        }
        if let Some(gt) = s.mask.as_ref().filter(|_| s.is_positive()) {
            let b = metrics::binarize(mask.data(), gt.width(), gt.height(), threshold)?;
            ious.push(metrics::iou(&b, gt)?);
        }
    }
    let n = ious.len();
    let mean_iou = (n > 0).then(|| ious.iter().sum::<f64>() / n as f64);
    let ar = (n > 0).then(|| {
        let hits: usize = ious.iter().map(|&v| IOU_THRESHOLDS.iter().filter(|&&t| v >= t - metrics::THRESHOLD_SLACK).count()).sum();
        hits as f64 / (n * IOU_THRESHOLDS.len()) as f64
    });
    Ok(PatchEval { mean_iou, ar, score_accuracy: correct as f64 / samples.len() as f64, positives: n })
}
