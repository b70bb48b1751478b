//! Binary container for model parameters.
//!
//! Layout: `b"SSPC"`, format version (u16 LE), header length (u32 LE), JSON
//! header, raw little-endian `f32` tensors in header order, CRC-32 (IEEE) of
//! the tensor payload (u32 LE).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::StftParams;

pub const MAGIC: &[u8; 4] = b"SSPC";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE: &str = "f32le";
const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("header length {0} exceeds limit")]
    HeaderTooLarge(usize),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("unsupported dtype {0:?}")]
    Dtype(String),
    #[error("payload size mismatch: header needs {expected} bytes, found {actual}")]
    PayloadSize { expected: usize, actual: usize },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("tensor {name:?}: {detail}")]
    Tensor { name: String, detail: String },
    #[error("expected architecture {expected:?}, found {actual:?}")]
    Architecture { expected: String, actual: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub confidential: bool,
    pub dtype: String,
    pub stft: StftParams,
    pub cutoff_hz: f64,
    pub layers: Vec<TensorEntry>,
    /// Architecture hyper-parameters.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f32>>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        if self.header.layers.len() != self.tensors.len() {
            return Err(CheckpointError::Header(format!(
                "{} layer entries for {} tensors",
                self.header.layers.len(),
                self.tensors.len()
            )));
        }
        for (entry, data) in self.header.layers.iter().zip(&self.tensors) {
            if element_count(&entry.shape) != Some(data.len()) {
                return Err(CheckpointError::Tensor {
                    name: entry.name.clone(),
                    detail: format!("shape {:?} vs {} values", entry.shape, data.len()),
                });
            }
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload: Vec<u8> = self
            .tensors
            .iter()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let mut out = Vec::with_capacity(14 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    /// Reads only the JSON header, without touching the payload.
    pub fn peek_header(bytes: &[u8]) -> Result<CheckpointHeader, CheckpointError> {
        Ok(split_header(bytes)?.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let (header, rest) = split_header(bytes)?;
        let mut expected = 0usize;
        for entry in &header.layers {
            let bytes_needed = element_count(&entry.shape)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Tensor {
                    name: entry.name.clone(),
                    detail: "shape overflows".into(),
                })?;
            expected = expected.checked_add(bytes_needed).ok_or(CheckpointError::Truncated("payload"))?;
        }
        let actual = rest.len().saturating_sub(4);
        if rest.len() < 4 || actual != expected {
            return Err(CheckpointError::PayloadSize { expected, actual });
        }
        let (payload, crc) = rest.split_at(expected);
        let stored = u32::from_le_bytes([crc[0], crc[1], crc[2], crc[3]]);
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut tensors = Vec::with_capacity(header.layers.len());
        let mut offset = 0;
        for entry in &header.layers {
            let n = element_count(&entry.shape).expect("checked above");
            let t: Vec<f32> = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Err(CheckpointError::Tensor {
                    name: entry.name.clone(),
                    detail: format!("non-finite value at {i}"),
                });
            }
            offset += 4 * n;
            tensors.push(t);
        }
        Ok(Checkpoint { header, tensors })
    }
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated("preamble"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if len > MAX_HEADER_LEN {
        return Err(CheckpointError::HeaderTooLarge(len));
    }
    let rest = &bytes[10..];
    if rest.len() < len {
        return Err(CheckpointError::Truncated("header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(CheckpointError::Dtype(header.dtype));
    }
    Ok((header, &rest[len..]))
}
