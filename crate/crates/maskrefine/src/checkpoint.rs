//! Checkpoint directory: `manifest.json` (model config, seed, stage, mode,
//! parameter table and payload hash) and `params.bin` (the parameters as
//! consecutive tensor records, in store order).

use std::path::Path;

use maskrefine_core::network::{Mode, Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{decode_tensor, encode_tensor, read_bytes, read_json, sha256_hex, write_bytes, write_json};

pub const CHECKPOINT_FORMAT: &str = "maskrefine-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor record inside `params.bin`.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// Last training stage completed (0 for an untrained model).
    pub stage: u8,
    pub mode: Mode,
    pub seed: u64,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub params_sha256: String,
}

pub fn encode_params(model: &Model) -> (Vec<u8>, Vec<ParamEntry>) {
    let mut bin = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in model.params.iter() {
        let rec = encode_tensor(name, t);
        entries.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: bin.len(), bytes: rec.len() });
        bin.extend_from_slice(&rec);
    }
    (bin, entries)
}

pub fn save_checkpoint(model: &Model, stage: u8, dir: &Path) -> Result<CheckpointManifest> {
    let (bin, params) = encode_params(model);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        stage,
        mode: model.mode(),
        seed: model.seed,
        model: model.cfg.clone(),
        params,
        params_sha256: sha256_hex(&bin),
    };
    write_bytes(&dir.join("params.bin"), &bin)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Rebuilds the model from the stored config and overwrites every
/// parameter from `params.bin`, checking names, shapes and the hash.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let manifest: CheckpointManifest = read_json(&mpath)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&mpath, format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let bpath = dir.join("params.bin");
    let bin = read_bytes(&bpath)?;
    if sha256_hex(&bin) != manifest.params_sha256 {
        return Err(Error::format(&bpath, "hash does not match the manifest"));
    }
    let mut model = Model::new(manifest.model.clone(), manifest.seed)?;
    if manifest.mode == Mode::Refined {
        model.attach_refinement()?;
    }
    let names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
    let stored: Vec<&str> = manifest.params.iter().map(|e| e.name.as_str()).collect();
    if names != stored {
        return Err(Error::format(&mpath, "parameter table does not match the model config"));
    }
    for e in &manifest.params {
        let rec = bin.get(e.offset..e.offset + e.bytes).ok_or_else(|| Error::format(&bpath, "truncated"))?;
        let (name, t) = decode_tensor(rec, &bpath)?;
        if name != e.name || t.shape() != e.shape.as_slice() {
            return Err(Error::format(&bpath, format!("record {} does not match the manifest", e.name)));
        }
        model.params.set(&name, t)?;
    }
    Ok((model, manifest))
}
