//! Binary model checkpoints.
//!
//! Layout: 8-byte magic `FADMODL1`, little-endian `u32` header length, a JSON
//! header `{input_shape, layers}`, little-endian `u64` parameter count, then the
//! raw little-endian `f32` parameters. Saving a loaded checkpoint reproduces
//! the original bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::model::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FADMODL1";

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().to_vec(),
    })
    .expect("header serialises");
    let params = model.params().flat();
    let mut out = Vec::with_capacity(8 + 4 + header.len() + 8 + params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| Error::format(at as u64, format!("checkpoint truncated, needed {n} bytes")))
    };
    if take(0, 8)? != MAGIC {
        return Err(Error::format(0, "not a model checkpoint (bad magic)"));
    }
    let header_len = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(12, header_len)?)
        .map_err(|e| Error::format(12, format!("bad checkpoint header: {e}")))?;
    let at = 12 + header_len;
    let count = u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize;
    let body = take(at + 8, count * 4)?;
    if bytes.len() != at + 8 + count * 4 {
        return Err(Error::format(
            (at + 8 + count * 4) as u64,
            "trailing bytes after parameters",
        ));
    }
    let flat = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Model::new(header.input_shape, header.layers, flat)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}
