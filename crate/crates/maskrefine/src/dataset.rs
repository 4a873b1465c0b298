//! Datasets on disk.
//!
//! ```text
//! <dir>/dataset.json        sample config, seed, split sizes
//! <dir>/manifest.jsonl      one record per sample: provenance + file names
//! <dir>/{train,val}/NNNNNN.tensor   patch [C, S, S]
//! <dir>/{train,val}/NNNNNN.pgm      W x W mask (positives only)
//! ```

use std::path::Path;

use maskrefine_core::synth::{Dataset, Sample, SampleConfig, SampleRecord, Split};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_json, read_json_lines, read_pgm, read_tensor, write_json, write_json_lines, write_pgm, write_tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub config: SampleConfig,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    #[serde(flatten)]
    pub record: SampleRecord,
    pub patch: String,
    pub mask: Option<String>,
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
    }
}

pub fn manifest_lines(ds: &Dataset) -> Vec<ManifestLine> {
    ds.records
        .iter()
        .map(|r| {
            let stem = format!("{}/{:06}", split_dir(r.split), r.index);
            ManifestLine { record: r.clone(), patch: format!("{}.tensor", stem), mask: (r.label > 0).then(|| format!("{}.pgm", stem)) }
        })
        .collect()
}

/// Writes every sample and the manifests; returns the written paths
/// relative to `dir`, manifests first.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<String>> {
    let info = DatasetInfo { config: ds.config.clone(), seed: ds.seed, n_train: ds.train.len(), n_val: ds.val.len() };
    write_json(&dir.join("dataset.json"), &info)?;
    let lines = manifest_lines(ds);
    write_json_lines(&dir.join("manifest.jsonl"), &lines)?;
    let mut written = vec!["dataset.json".to_string(), "manifest.jsonl".to_string()];
    let samples = ds.train.iter().chain(&ds.val);
    for (line, s) in lines.iter().zip(samples) {
        write_tensor(&dir.join(&line.patch), "patch", &s.patch)?;
        written.push(line.patch.clone());
        if let (Some(file), Some(mask)) = (&line.mask, &s.mask) {
            write_pgm(&dir.join(file), mask)?;
            written.push(file.clone());
        }
    }
    Ok(written)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let info: DatasetInfo = read_json(&dir.join("dataset.json"))?;
    let mpath = dir.join("manifest.jsonl");
    let lines: Vec<ManifestLine> = read_json_lines(&mpath)?;
    let (mut train, mut val, mut records) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let (_, patch) = read_tensor(&dir.join(&line.patch))?;
        let mask = line.mask.as_ref().map(|m| read_pgm(&dir.join(m))).transpose()?;
        if (line.record.label > 0) != mask.is_some() {
            return Err(Error::format(&mpath, format!("sample {} label and mask disagree", line.patch)));
        }
        let sample = Sample { patch, label: line.record.label, mask };
        match line.record.split {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
        }
        records.push(line.record);
    }
    if train.len() != info.n_train || val.len() != info.n_val {
        return Err(Error::format(&mpath, "sample counts do not match dataset.json"));
    }
    Ok(Dataset { config: info.config, seed: info.seed, train, val, records })
}
