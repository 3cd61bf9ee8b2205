//! Single-file checkpoint: magic, JSON header, raw little-endian `f64` data.
//!
//! ```text
//! "GLSEGCK1" | header_len: u64 LE | header JSON | tensor data (f64 LE, header order)
//! ```
//! The header carries the [`NetworkConfig`] and a table of named tensors
//! (learnable parameters and batch-norm running statistics).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::NetworkParams;
use super::NetworkConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GLSEGCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(params: &NetworkParams) -> Vec<u8> {
    let tensors = params.tensors();
    let header = Header {
        config: params.config.clone(),
        tensors: tensors
            .iter()
            .map(|t| Entry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n_values: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &tensors {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    header.config.validate()?;

    let mut params = NetworkParams::init(&header.config, 0);
    let mut data = &bytes[16 + hlen..];
    {
        let mut slots = params.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the configuration"));
        }
        for (slot, entry) in slots.iter_mut().zip(&header.tensors) {
            if slot.name != entry.name || slot.shape != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "expected {} {:?}, found {} {:?}",
                    slot.name, slot.shape, entry.name, entry.shape
                )));
            }
            let need = slot.data.len() * 8;
            if data.len() < need {
                return Err(bad("truncated tensor data"));
            }
            for (v, chunk) in slot.data.iter_mut().zip(data[..need].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[need..];
        }
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(params)
}

/// Atomic save: write a sibling temp file, then rename over `path`.
pub fn save(path: &Path, params: &NetworkParams) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetworkParams> {
    from_bytes(&fs::read(path)?)
}
