//! Probe checkpoints: `probe.json` (config, tensor table, metadata) next to
//! `probe.bin` (every tensor as little-endian f32, concatenated in layout
//! order: gates or attention modules first, `head.weight`, `head.bias` last).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{ProbeParams, TensorSpec};
use super::ProbeConfig;
use crate::error::{ProbeError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_JSON: &str = "probe.json";
pub const CHECKPOINT_BIN: &str = "probe.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ProbeConfig,
    pub tensors: Vec<TensorSpec>,
    pub bin_sha256: String,
    #[serde(default)]
    pub training: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ProbeParams<f32>,
}

pub(crate) fn encode_values(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// SHA-256 of the `probe.bin` encoding of `params`.
pub fn params_sha256(params: &ProbeParams<f32>) -> String {
    hex::encode(Sha256::digest(encode_values(&params.values)))
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ProbeParams<f32>,
    training: BTreeMap<String, serde_json::Value>,
) -> Result<CheckpointMeta> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| ProbeError::io(dir, e))?;
    let bytes = encode_values(&params.values);
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        tensors: params.layout().tensors.clone(),
        bin_sha256: hex::encode(Sha256::digest(&bytes)),
        training,
    };
    let bin = dir.join(CHECKPOINT_BIN);
    std::fs::write(&bin, &bytes).map_err(|e| ProbeError::io(&bin, e))?;
    let json_path = dir.join(CHECKPOINT_JSON);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| ProbeError::json(&json_path, e))?;
    std::fs::write(&json_path, json).map_err(|e| ProbeError::io(&json_path, e))?;
    Ok(meta)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let json_path = dir.join(CHECKPOINT_JSON);
    let text = std::fs::read_to_string(&json_path).map_err(|e| ProbeError::io(&json_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| ProbeError::json(&json_path, e))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(ProbeError::UnsupportedVersion {
            found: meta.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let bin = dir.join(CHECKPOINT_BIN);
    let bytes = std::fs::read(&bin).map_err(|e| ProbeError::io(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(ProbeError::Shape(format!("{} is not a whole number of f32s", bin.display())));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let params = ProbeParams::from_values(&meta.config, values)?;
    if params.layout().tensors != meta.tensors {
        return Err(ProbeError::Shape(
            "checkpoint tensor table does not match its config".into(),
        ));
    }
    Ok(Checkpoint { meta, params })
}
