//! Activation-patching effect per layer.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Target-token probability for one prompt with a corrupted run, and with
/// the clean activation of `layer` restored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub prompt_id: String,
    pub layer: usize,
    pub p_corrupted: f64,
    pub p_patched: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    pub mean_delta: f64,
    pub records: usize,
}

fn check_probability(r: &PatchRecord, field: &'static str, value: f64) -> Result<(), PipelineError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(PipelineError::InvalidProbability {
            prompt_id: r.prompt_id.clone(),
            layer: r.layer,
            field,
            value,
        })
    }
}

/// `p_patched - p_corrupted`.
pub fn patching_delta(r: &PatchRecord) -> Result<f64, PipelineError> {
    check_probability(r, "p_corrupted", r.p_corrupted)?;
    check_probability(r, "p_patched", r.p_patched)?;
    Ok(r.p_patched - r.p_corrupted)
}

/// Mean delta per layer, largest first; equal means keep layer order.
pub fn rank_patching(records: &[PatchRecord]) -> Result<Vec<LayerDelta>, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::NoRecords);
    }
    let max_layer = records.iter().map(|r| r.layer).max().unwrap_or(0);
    let mut sums = vec![(0.0f64, 0usize); max_layer + 1];
    for r in records {
        let d = patching_delta(r)?;
        sums[r.layer].0 += d;
        sums[r.layer].1 += 1;
    }
    let mut ranked: Vec<LayerDelta> = sums
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(layer, (s, n))| LayerDelta {
            layer,
            mean_delta: s / n as f64,
            records: n,
        })
        .collect();
    ranked.sort_by(|a, b| b.mean_delta.total_cmp(&a.mean_delta).then(a.layer.cmp(&b.layer)));
    Ok(ranked)
}

#[derive(Debug, thiserror::Error)]
pub enum PatchIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid patch record on line {line}: {source}")]
    Record {
        path: std::path::PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Reads one JSON patch record per non-blank line.
pub fn read_patch_records(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>, PatchIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PatchIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| PatchIoError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn write_patch_records(records: &[PatchRecord], path: impl AsRef<Path>) -> Result<(), PatchIoError> {
    let path = path.as_ref();
    let io_err = |source| PatchIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("patch records always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
