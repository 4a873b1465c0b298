#![allow(dead_code)]

use maskrefine::config::{EvalConfig, RunConfig};
use maskrefine_core::network::{HeadConfig, HeadVariant, Model, ModelConfig, TrunkConfig};
use maskrefine_core::synth::SampleConfig;
use maskrefine_core::train::TrainConfig;
use maskrefine_core::PadMode;

/// A 32-pixel model small enough to train in well under a second.
pub fn tiny_run_config() -> RunConfig {
    let mut model = ModelConfig::default();
    model.trunk = TrunkConfig {
        width: 32,
        pools: 3,
        depth: 4,
        features: 4,
        base_channels: 2,
        channels: None,
        in_channels: 1,
        context: 8,
        pad_mode: PadMode::Reflect,
    };
    model.head = HeadConfig { variant: HeadVariant::C, reduce: 2, hidden: 8, score_hidden: 8 };
    model.refinement.k = 4;
    model.refinement.skip_hidden = 2;
    RunConfig {
        sample: SampleConfig::for_width(32, 8),
        model,
        train: TrainConfig { epochs_stage1: 1, epochs_stage2: 1, batch_size: 8, lr_stage2: 1e-2, ..TrainConfig::default() },
        eval: EvalConfig { scenes: 2, canvas: 64, top_n: 10, ..EvalConfig::default() },
        n_train: 24,
        n_val: 8,
        ..RunConfig::desk()
    }
}

pub fn param_bits(m: &Model) -> Vec<(String, Vec<u64>)> {
    m.params.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}
