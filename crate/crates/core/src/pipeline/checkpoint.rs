//! Versioned field checkpoints: a JSON header followed by little-endian f32
//! parameters.
//!
//! Layout: the 8-byte magic, a little-endian `u32` header length, the header,
//! then `param_count` f32 values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::field::{FieldArch, RadianceField};

const MAGIC: &[u8; 8] = b"NERFMDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn new((seed, stream, word_pos): ([u8; 32], u64, u128)) -> Self {
        Self {
            seed: hex::encode(seed),
            stream,
            word_pos: word_pos.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub stage: u32,
    pub arch: FieldArch,
    pub iteration: u64,
    pub rng: RngState,
    pub config_hash: String,
    pub param_count: usize,
}

pub fn save_checkpoint(path: &Path, field: &RadianceField, header: &CheckpointHeader) -> Result<()> {
    if header.param_count != field.parameter_count() || header.arch != field.arch {
        return Err(Error::Checkpoint("header does not describe the field".into()));
    }
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + 4 * field.params.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for &p in &field.params {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).at(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(RadianceField, CheckpointHeader)> {
    let bytes = std::fs::read(path).at(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a field checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let data = &bytes[12 + hlen..];
    if data.len() != 4 * header.param_count {
        return Err(bad("parameter block size mismatch"));
    }
    let params = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let field = RadianceField::from_params(header.arch.clone(), params)?;
    Ok((field, header))
}
