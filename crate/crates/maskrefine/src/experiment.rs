//! Training drivers shared by the command line and the acceptance suite.

use std::time::Instant;

use maskrefine_core::network::{MaskMode, Model};
use maskrefine_core::refinement::StackKind;
use maskrefine_core::synth::{make_dataset, Dataset};
use maskrefine_core::train::{self, evaluate, PatchEval, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;

pub struct StageRun {
    pub model: Model,
    pub state: TrainState,
    pub seconds: f64,
}

/// The dataset described by `cfg` for `seed`.
pub fn dataset(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    Ok(make_dataset(&cfg.sample, seed, cfg.n_train, cfg.n_val)?)
}

/// Stage 1 on a fresh model seeded with `seed`.
pub fn stage1(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<StageRun> {
    let t = Instant::now();
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let tc = train::TrainConfig { seed, ..cfg.train.clone() };
    let state = train::train_stage1(&mut model, &ds.train, &ds.val, &tc)?;
    Ok(StageRun { model, state, seconds: t.elapsed().as_secs_f64() })
}

/// Stage 2 of a `kind` refinement stack on a copy of the stage-1 model.
pub fn stage2(base: &Model, kind: StackKind, cfg: &RunConfig, ds: &Dataset) -> Result<StageRun> {
    let t = Instant::now();
    let mut model = base.clone();
    model.cfg.refinement.kind = kind;
    let tc = train::TrainConfig { seed: base.seed, ..cfg.train.clone() };
    let state = train::train_stage2(&mut model, &ds.train, &ds.val, &tc)?;
    Ok(StageRun { model, state, seconds: t.elapsed().as_secs_f64() })
}

/// Coarse against refined masks of one stage-2 model on the validation
/// positives, one proposal per patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchComparison {
    pub coarse: PatchEval,
    pub refined: PatchEval,
    /// Refined minus coarse mean IoU.
    pub iou_gain: f64,
    /// Refined over coarse AR, minus one.
    pub ar_relative_gain: f64,
}

pub fn compare_patches(model: &Model, ds: &Dataset, batch: usize) -> Result<PatchComparison> {
    let coarse = evaluate(model, &ds.val, MaskMode::Coarse, batch)?;
    let refined = evaluate(model, &ds.val, MaskMode::Refined, batch)?;
    let iou_gain = refined.mean_iou.unwrap_or(0.0) - coarse.mean_iou.unwrap_or(0.0);
    let ar_relative_gain = match (coarse.ar, refined.ar) {
        (Some(c), Some(r)) if c > 0.0 => r / c - 1.0,
        _ => 0.0,
    };
    Ok(PatchComparison { coarse, refined, iou_gain, ar_relative_gain })
}
