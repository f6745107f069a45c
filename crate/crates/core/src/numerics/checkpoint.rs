//! Checkpoint file layout (version 1). All integers little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"HAHECKPT"
//! 8       4     format version (u32) = 1
//! 12      8     header length H in bytes (u64)
//! 20      H     UTF-8 JSON header:
//!                 { "metadata": <object>,
//!                   "params": [ { "name", "shape", "trainable", "offset", "len" }, ... ] }
//! 20+H    4·N   payload: every parameter's values as f32, in header order;
//!               `offset`/`len` count f32 elements from the payload start
//! ```
//!
//! The header is serialized with sorted object keys, so identical stores and
//! metadata produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HAHECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// Serialize a parameter store plus free-form metadata into bytes.
pub fn encode(store: &ParamStore, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, p) in store.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset,
            len: p.value.len(),
        });
        offset += p.value.len();
    }
    let header = serde_json::to_vec(&Header {
        metadata: metadata.clone(),
        params: entries,
    })
    .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let payload = &bytes[hend..];
    let mut store = ParamStore::new();
    for entry in header.params {
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("payload truncated at {}", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.insert(entry.name, Tensor::new(entry.shape, data)?, entry.trainable)?;
    }
    Ok((store, header.metadata))
}

pub fn save(path: &Path, store: &ParamStore, metadata: &serde_json::Value) -> Result<()> {
    let bytes = encode(store, metadata)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
