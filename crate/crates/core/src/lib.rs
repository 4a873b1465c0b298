//! Differentiable tensor engine and a bottom-up/top-down mask refinement
//! network for object proposal generation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and anything touching the filesystem or clocks live in the
//! `maskrefine` companion crate.
//!
//! Layout:
//! - [`tensor`], [`graph`]: dense f64 tensors and a reverse-mode tape.
//! - [`gradcheck`]: central-difference verification of the tape.
//! - [`checks`]: gradient and refinement-equivalence self-checks.
//! - [`refinement`]: refinement modules, the refactored form and the stack.
//! - [`network`]: trunk, heads A/B/C, full model and the sliding-window proposer.
//! - [`synth`]: deterministic synthetic scenes and training triplets.
//! - [`train`]: two-stage SGD protocol.
//! - [`metrics`]: IoU, binarization, average recall and AUC.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checks;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
mod kernels;
pub mod metrics;
pub mod network;
pub mod param;
pub mod refinement;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{ConvSpec, Graph, OpKind, PadMode, Var};
pub use tensor::Tensor;
