use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.id(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {}", name)));
        }
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Adds a tensor drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Result<ParamId> {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let t = Tensor::from_fn(shape, |_| rng::uniform(rng, -bound, bound));
        self.add(name, t)
    }

    /// He-uniform weights: bound `sqrt(6 / fan_in)`, keeping activation
    /// variance roughly constant through ReLU layers.
    pub fn add_he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Result<ParamId> {
        let bound = libm::sqrt(6.0 / fan_in.max(1) as f64);
        let t = Tensor::from_fn(shape, |_| rng::uniform(rng, -bound, bound));
        self.add(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count of the parameters whose name satisfies `keep`.
    pub fn count_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| keep(n)).map(|(_, t)| t.len()).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter {}", name)))?;
        if self.get(id).shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {} has shape {:?}, got {:?}",
                name,
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Puts every parameter on `graph` as a leaf; `trainable` decides which
    /// ones receive gradients.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .iter()
            .map(|(name, t)| graph.leaf(t.clone(), trainable(name)))
            .collect();
        Bound { vars }
    }
}

/// Graph leaves for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding from leaves created elsewhere, one per parameter in store
    /// order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
