//! Run manifests: the resolved configuration of a command plus content
//! hashes of its inputs and outputs. No timestamps, so identical runs give
//! byte-identical manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::format::{read_bytes, sha256_hex, write_json};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the directory it was hashed in.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Command-specific settings (flags) as given.
    pub settings: serde_json::Value,
    pub config: crate::config::RunConfig,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, settings: serde_json::Value, config: crate::config::RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            settings,
            config,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST), self)
    }
}

/// Hashes `dir/rel` for each relative path.
pub fn hash_artifacts(dir: &Path, rel: &[String]) -> Result<Vec<Artifact>> {
    rel.iter()
        .map(|p| {
            let bytes = read_bytes(&dir.join(p))?;
            Ok(Artifact { path: p.clone(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
        })
        .collect()
}
