//! Snapshot container.
//!
//! Layout:
//!
//! ```text
//! magic       8 bytes   "CDASNAP\0"
//! version     u32 LE
//! header_len  u32 LE
//! header      JSON (config, seed, epoch, rng state, parameter layout)
//! params      param_count x f64 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelSnapshot, ParamBlock};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"CDASNAP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a snapshot file (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {found} (this build reads version {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("truncated snapshot: {0}")]
    Truncated(&'static str),
    #[error("malformed snapshot header: {0}")]
    Header(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    epoch: usize,
    rng: RngState,
    param_count: usize,
    layout: Vec<ParamBlock>,
}

pub fn encode(snapshot: &ModelSnapshot) -> Vec<u8> {
    let header = Header {
        config: snapshot.config().clone(),
        seed: snapshot.seed,
        epoch: snapshot.epoch,
        rng: snapshot.rng.clone(),
        param_count: snapshot.params.len(),
        layout: snapshot.network().layout(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * snapshot.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &snapshot.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelSnapshot, SnapshotError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let word = |at: usize, what| -> Result<u32, SnapshotError> {
        let b = bytes.get(at..at + 4).ok_or(SnapshotError::Truncated(what))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let version = word(8, "version")?;
    if version != FORMAT_VERSION {
        return Err(SnapshotError::Version { found: version });
    }
    let header_len = word(12, "header length")? as usize;
    let header_bytes = bytes.get(16..16 + header_len).ok_or(SnapshotError::Truncated("header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| SnapshotError::Header(e.to_string()))?;
    let body = &bytes[16 + header_len..];
    if body.len() != 8 * header.param_count {
        return Err(SnapshotError::Truncated("parameter array"));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if header.rng.restore().is_none() {
        return Err(SnapshotError::Header("unreadable rng state".into()));
    }
    let snapshot = ModelSnapshot::from_parts(header.config, params, header.rng, header.seed, header.epoch)?;
    if snapshot.network().layout() != header.layout {
        return Err(SnapshotError::Header("parameter layout does not match the config".into()));
    }
    Ok(snapshot)
}

/// Writes through a temporary file and renames it into place.
pub fn save(snapshot: &ModelSnapshot, path: &Path) -> Result<(), SnapshotError> {
    crate::fsutil::write_atomic(path, &encode(snapshot))
        .map_err(|source| SnapshotError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<ModelSnapshot, SnapshotError> {
    let bytes = fs::read(path).map_err(|source| SnapshotError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}
