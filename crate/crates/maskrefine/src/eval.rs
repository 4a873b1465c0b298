//! Proposal evaluation on whole synthetic scenes and on labeled patches.

use maskrefine_core::metrics::{self, evaluate, ARReport, BinaryMask, ImageEval, ProposalSet, ScaleBuckets, ScoredMask};
use maskrefine_core::network::{InferenceConfig, MaskMode, Model};
use maskrefine_core::rng::{self, tags};
use maskrefine_core::synth::{eval_scene_config, generate_scene, scene_ground_truth, SampleConfig, Scene};
use maskrefine_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::error::Result;

/// Where proposals come from.
#[derive(Clone, Copy)]
pub enum Proposer<'a> {
    Model(&'a Model, MaskMode),
    /// The ground truths themselves, scored by area; AR is 1 by construction.
    Oracle,
}

/// Evaluation scenes for `seed`, objects sized inside the positive band.
pub fn eval_scenes(sample: &SampleConfig, eval: &EvalConfig, seed: u64) -> Vec<Scene> {
    let cfg = eval_scene_config(sample, eval.canvas);
    let mut r = rng::stream(seed, tags::SCENES);
    (0..eval.scenes).map(|_| generate_scene(&cfg, r.gen())).collect()
}

/// `[1, C, H, W]` image of a scene with the gray plane repeated per channel.
pub fn scene_image(scene: &Scene, channels: usize) -> Result<Tensor> {
    let plane = scene.render();
    let data: Vec<f64> = (0..channels).flat_map(|_| plane.data().iter().copied()).collect();
    Ok(Tensor::new(&[1, channels, scene.height, scene.width], data)?)
}

/// Model proposals for one scene as full-canvas binary masks.
pub fn scene_proposals(model: &Model, scene: &Scene, infer: &InferenceConfig, threshold: f64) -> Result<ProposalSet> {
    let image = scene_image(scene, model.cfg.trunk.in_channels)?;
    let w = model.width();
    let items = model
        .propose(&image, infer)?
        .into_iter()
        .map(|p| {
            let m = metrics::binarize(&p.mask, w, w, threshold)?;
            Ok(ScoredMask { mask: m.placed(p.x, p.y, scene.width, scene.height), score: p.score })
        })
        .collect::<maskrefine_core::Result<Vec<_>>>()?;
    Ok(ProposalSet::new(items))
}

fn oracle_proposals(gts: &[BinaryMask]) -> ProposalSet {
    ProposalSet::new(gts.iter().map(|m| ScoredMask { mask: m.clone(), score: m.area() as f64 }).collect())
}

/// AR/AUC report over the evaluation scenes. Scale buckets follow the
/// patch width. `None` when the scenes hold no ground truth.
pub fn evaluate_scenes(
    proposer: Proposer,
    sample: &SampleConfig,
    eval: &EvalConfig,
    infer: &InferenceConfig,
    seed: u64,
) -> Result<Option<ARReport>> {
    let mut images = Vec::with_capacity(eval.scenes);
    for scene in eval_scenes(sample, eval, seed) {
        let gts = scene_ground_truth(&scene);
        let props = match proposer {
            Proposer::Oracle => oracle_proposals(&gts),
            Proposer::Model(model, mode) => {
                let cfg = InferenceConfig { top_n: eval.top_n, mode, ..infer.clone() };
                scene_proposals(model, &scene, &cfg, eval.threshold)?
            }
        };
        images.push(ImageEval::new(&props, &gts)?);
    }
    Ok(evaluate(&images, ScaleBuckets::for_patch_width(sample.width), eval.grid))
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mode: String,
    /// Mean IoU and single-proposal AR over validation positives.
    pub patch: Option<maskrefine_core::train::PatchEval>,
    pub scenes: Option<ARReport>,
}
