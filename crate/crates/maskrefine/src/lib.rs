//! Filesystem side of the mask refinement network: tensor, mask and
//! checkpoint formats, datasets on disk, run manifests, scene-level
//! evaluation, timing and the experiment drivers behind the `maskrefine`
//! binary.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod format;
pub mod manifest;

pub use error::{Error, Result};
pub use maskrefine_core as core;
