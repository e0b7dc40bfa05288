//! Checkpoint container: versioned header, JSON manifest, little-endian
//! scalar blob. Round-trips parameters bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"SRNNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest entry `{name}`: {reason}")]
    BadEntry { name: String, reason: String },
    #[error("unsupported dtype `{0}` (this build stores f64 only)")]
    BadDtype(String),
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    /// Flat key=value config echo, when the checkpoint belongs to a run.
    config: Option<String>,
}

/// Write `store` (and an optional config echo) to `path`.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config_echo: Option<&str>,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f64".to_string(),
            offset: blob.len() as u64,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        entries,
        config: config_echo.map(str::to_string),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back into a fresh store, plus its config echo.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Option<String>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    load_checkpoint_bytes(&bytes)
}

/// Decode a checkpoint from an in-memory buffer.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<(ParamStore, Option<String>), CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = MAGIC.len();
    let version = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    pos += 4;
    let manifest_len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    if bytes.len() < pos + manifest_len {
        return Err(CheckpointError::BadEntry {
            name: "<manifest>".into(),
            reason: "file truncated before manifest end".into(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[pos..pos + manifest_len])?;
    let blob = &bytes[pos + manifest_len..];

    let mut store = ParamStore::new();
    for entry in &manifest.entries {
        if entry.dtype != "f64" {
            return Err(CheckpointError::BadDtype(entry.dtype.clone()));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(numel.checked_mul(8).ok_or_else(|| CheckpointError::BadEntry {
                name: entry.name.clone(),
                reason: "element count overflows".into(),
            })?)
            .ok_or_else(|| CheckpointError::BadEntry {
                name: entry.name.clone(),
                reason: "offset overflows".into(),
            })?;
        if end > blob.len() {
            return Err(CheckpointError::BadEntry {
                name: entry.name.clone(),
                reason: format!("blob range {start}..{end} exceeds blob size {}", blob.len()),
            });
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| CheckpointError::BadEntry {
            name: entry.name.clone(),
            reason: e.to_string(),
        })?;
        store.insert(&entry.name, tensor).map_err(|e| CheckpointError::BadEntry {
            name: entry.name.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok((store, manifest.config))
}
