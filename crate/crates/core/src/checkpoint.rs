//! Bit-exact model checkpoints.
//!
//! Layout: the magic bytes `LRD1`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header (config, tensor directory,
//! payload digest) and the raw little-endian tensor payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DecoderModel, ModelConfig};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"LRD1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
    /// Hex SHA-256 of the payload.
    pub payload_digest: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serializes a model to checkpoint bytes.
pub fn encode<F: Real>(model: &DecoderModel<F>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.num_params() * F::DTYPE.size_of());
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, p) in model.names().iter().zip(model.params()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset: payload.len(),
        });
        for &x in p.data() {
            x.write_le(&mut payload);
        }
    }
    let header = CheckpointHeader {
        config: model.config().clone(),
        dtype: F::DTYPE,
        tensors,
        payload_len: payload.len(),
        payload_digest: sha256_hex(&payload),
    };
    let head = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + head.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&payload);
    out
}

/// Writes the checkpoint atomically and returns the hex SHA-256 of the file.
pub fn save_checkpoint<F: Real>(model: &DecoderModel<F>, path: &Path) -> Result<String> {
    let bytes = encode(model);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

/// Parses and validates checkpoint bytes; `path` only labels errors.
pub fn decode<F: Real>(bytes: &[u8], path: &Path) -> Result<DecoderModel<F>> {
    let (header, payload) = split(bytes, path)?;
    let width = header.dtype.size_of();
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * width;
        let raw = payload
            .get(e.offset..end)
            .ok_or_else(|| bad(path, format!("tensor {} lies outside the payload", e.name)))?;
        let data: Vec<F> = match header.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| F::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| F::of(f64::read_le(c))).collect(),
        };
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    DecoderModel::from_parts(header.config, named).map_err(|e| bad(path, e.to_string()))
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointHeader, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad(path, "not an LRD1 checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(path, format!("format version {version}, expected {VERSION}")));
    }
    let head_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let head = bytes
        .get(16..16 + head_len)
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(head).map_err(|e| bad(path, format!("header: {e}")))?;
    let payload = &bytes[16 + head_len..];
    if payload.len() != header.payload_len || sha256_hex(payload) != header.payload_digest {
        return Err(bad(path, "payload digest mismatch"));
    }
    Ok((header, payload))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(split(&bytes, path)?.0)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<DecoderModel<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    decode(&bytes, path)
}
