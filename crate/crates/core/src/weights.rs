//! `ICAMW001` weight files.
//!
//! ```text
//! magic       8 bytes  "ICAMW001"
//! header_len  u64 LE
//! header      UTF-8 JSON, header_len bytes
//! payload     little-endian f32 values
//! ```
//!
//! The header maps each tensor name to `{"shape", "offset", "nbytes"}`, with
//! offsets relative to the start of the payload. The reserved key
//! `__metadata__` holds the architecture as a [`ModelSpec`] object. Keys are
//! written in sorted order and tensors are laid out in declaration order, so
//! saving the same model always produces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ICAMW001";
pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut header = Map::new();
    header.insert(METADATA_KEY.into(), serde_json::to_value(model.spec())?);
    let mut payload = Vec::new();
    for (name, t) in model.params() {
        let entry = TensorEntry {
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            nbytes: (t.len() * 4) as u64,
        };
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        header.insert(name.clone(), serde_json::to_value(entry)?);
    }
    let header = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .and_then(|b| b.try_into().ok())
        .ok_or(Error::TruncatedHeader)?;
    let header_len = u64::from_le_bytes(len_bytes);
    let header_end = 16u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or(Error::TruncatedHeader)? as usize;
    let header: Map<String, Value> =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let spec: ModelSpec = header
        .get(METADATA_KEY)
        .ok_or_else(|| Error::MalformedHeader(format!("missing `{METADATA_KEY}`")))
        .and_then(|v| serde_json::from_value(v.clone()).map_err(|e| Error::MalformedHeader(e.to_string())))?;
    spec.validate()?;

    let expected = spec.parameter_shapes();
    for key in header.keys() {
        if key != METADATA_KEY && !expected.iter().any(|(n, _)| n == key) {
            return Err(Error::InconsistentEntry {
                field: key.clone(),
                reason: "not a parameter of the declared architecture".into(),
            });
        }
    }

    let mut params = Vec::with_capacity(expected.len());
    for (name, shape) in expected {
        let inconsistent = |reason: String| Error::InconsistentEntry {
            field: name.clone(),
            reason,
        };
        let entry: TensorEntry = header
            .get(&name)
            .ok_or_else(|| inconsistent("missing from header".into()))
            .and_then(|v| serde_json::from_value(v.clone()).map_err(|e| inconsistent(e.to_string())))?;
        if entry.shape != shape {
            return Err(inconsistent(format!(
                "shape {:?} does not match architecture {shape:?}",
                entry.shape
            )));
        }
        let count: usize = shape.iter().product();
        if entry.nbytes != 4 * count as u64 {
            return Err(inconsistent(format!(
                "nbytes {} does not match {count} f32 values",
                entry.nbytes
            )));
        }
        let start = entry.offset;
        let end = start
            .checked_add(entry.nbytes)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| Error::TruncatedPayload(name.clone()))?;
        let data = payload[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    Model::new(spec, params)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::from(e).at(path))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode_model(&bytes).map_err(|e| e.at(path))
}
