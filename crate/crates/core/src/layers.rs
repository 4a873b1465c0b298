//! Parameterized layers: thin wrappers tying graph ops to a [`ParamStore`].
//! Weights start He-uniform, biases at zero.

use alloc::format;

use crate::error::Result;
use crate::graph::{ConvSpec, Graph, PadMode, Var};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv {
    /// Registers `{prefix}.weight` and `{prefix}.bias`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_he_uniform(
            &format!("{}.weight", prefix),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        )?;
        let bias = store.add(&format!("{}.bias", prefix), Tensor::zeros(&[out_channels]))?;
        Ok(Self { weight, bias, in_channels, out_channels, kernel, spec })
    }

    /// Reflective padding falls back to zero padding on maps too small to
    /// mirror (side <= pad).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut spec = self.spec;
        if spec.mode == PadMode::Reflect {
            if let [_, _, h, w] = *g.shape(x) {
                if spec.pad >= h || spec.pad >= w {
                    spec.mode = PadMode::Zero;
                }
            }
        }
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), spec)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        prefix: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let weight = store.add_he_uniform(&format!("{}.weight", prefix), &[out_features, in_features], in_features, rng)?;
        let bias = store.add(&format!("{}.bias", prefix), Tensor::zeros(&[out_features]))?;
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn param_count(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }
}
