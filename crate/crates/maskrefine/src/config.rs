//! Run configuration: everything a command needs besides its flags. Missing
//! top-level sections take their desk defaults; a section that is present
//! must be complete.

use std::path::Path;

use maskrefine_core::metrics::AucGrid;
use maskrefine_core::network::{InferenceConfig, ModelConfig};
use maskrefine_core::synth::SampleConfig;
use maskrefine_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::format::read_json;

/// Scene-level proposal evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Number of evaluation scenes.
    pub scenes: usize,
    /// Side of each square evaluation scene.
    pub canvas: usize,
    /// Proposals kept per scene.
    pub top_n: usize,
    pub grid: AucGrid,
    /// Mask binarization threshold.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { scenes: 50, canvas: 128, top_n: 100, grid: AucGrid::Reported, threshold: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sample: SampleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// The desk configuration: W = 64, P = 3, 5000 train / 500 val samples.
    pub fn desk() -> Self {
        let mut model = ModelConfig::default();
        model.refinement.skip_hidden = 32;
        let train = TrainConfig { lr_stage1: 0.05, lr_stage2: 0.03, epochs_stage1: 8, epochs_stage2: 6, ..TrainConfig::default() };
        Self {
            sample: SampleConfig::default(),
            model,
            train,
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            n_train: 5000,
            n_val: 500,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section and their consistency.
    pub fn validate(&self) -> Result<()> {
        self.sample.validate()?;
        self.train.validate()?;
        self.model.trunk.validate()?;
        let t = &self.model.trunk;
        if t.width != self.sample.width || t.context != self.sample.context || t.in_channels != self.sample.channels {
            return Err(crate::Error::Config(format!(
                "model expects {}x{} patches with context {} and {} channels, data has {}x{}, context {}, {} channels",
                t.width, t.width, t.context, t.in_channels, self.sample.width, self.sample.width, self.sample.context, self.sample.channels
            )));
        }
        if self.n_train == 0 {
            return Err(crate::Error::Config("n_train must be at least 1".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(crate::Error::Config("binarization threshold must be in (0, 1)".into()));
        }
        if self.eval.canvas < t.width || self.eval.top_n == 0 {
            return Err(crate::Error::Config("eval canvas must hold one window and top_n must be positive".into()));
        }
        Ok(())
    }
}
