//! Parameter file: 8-byte magic, little-endian u64 header length, JSON
//! header, then every tensor as little-endian f32 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamSet;
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XRIDCKPT";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Refuse absurd header lengths from corrupt files.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &ParamSet,
    meta: &serde_json::Value,
) -> Result<()> {
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        meta: meta.clone(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * params.n_values());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in params.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamSet, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(bad("header length out of range"));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    let mut params = ParamSet::new();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated payload for {}", t.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.add(&t.name, Tensor::new(t.shape, data)?, t.trainable)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|_| bad("read failed"))? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((params, header.meta))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, params, meta)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
