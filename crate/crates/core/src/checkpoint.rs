//! Checkpoint container.
//!
//! Layout: the 4-byte magic `SFCK`, a little-endian `u64` header length, a
//! JSON header, then every parameter tensor as little-endian `f64` values in
//! declaration order. The header records the model configuration, the byte
//! offset (relative to the start of the data block) and shape of each tensor,
//! and the format version. Arbitrary run metadata rides along under `extra`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::{named_tensors, Parameters};

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn to_bytes(params: &ModelParams, extra: serde_json::Value) -> Result<Vec<u8>> {
    let named = named_tensors(params);
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry { name: name.clone(), offset, shape: t.shape().to_vec() };
            offset += 8 * t.len() as u64;
            entry
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: "f64le".into(),
        config: params.config.clone(),
        tensors,
        extra,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(malformed("missing SFCK magic"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(malformed("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(malformed(format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype != "f64le" {
        return Err(malformed(format!("unsupported dtype {}", header.dtype)));
    }
    Ok((header, &body[len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, serde_json::Value)> {
    let (header, data) = read_header(bytes)?;
    // The rng only fills tensors that are overwritten below.
    let mut params = ModelParams::new(header.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> =
        named_tensors(&params).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.tensors.len() {
        return Err(malformed(format!(
            "{} tensors stored, configuration has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(malformed(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    let mut i = 0;
    let mut status = Ok(());
    params.visit_mut(&mut |t| {
        let entry = &header.tensors[i];
        i += 1;
        let start = entry.offset as usize;
        let end = start + 8 * t.len();
        if end > data.len() {
            status = Err(malformed(format!("data for {} is truncated", entry.name)));
            return;
        }
        for (v, chunk) in t.data_mut().iter_mut().zip(data[start..end].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    });
    status?;
    Ok((params, header.extra))
}

pub fn save(path: &Path, params: &ModelParams, extra: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(params, extra)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
