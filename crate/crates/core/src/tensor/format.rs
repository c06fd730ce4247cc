//! Binary tensor file format.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SATN"
//! 4       1           version (1)
//! 5       1           rank byte: low 7 bits = rank, high bit set = u32 payload
//! 6       4 * rank    dims, u32 little-endian
//! ...     4 * numel   payload, f32 (or u32) little-endian, row-major
//! ```
//!
//! A clear high bit is the ordinary `f32` tensor. The `u32` variant carries
//! integer tables such as token positions.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SATN";
pub const VERSION: u8 = 1;
const U32_FLAG: u8 = 0x80;
const MAX_RANK: usize = 0x7f;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32 { dims: Vec<usize>, values: Vec<f32> },
    U32 { dims: Vec<usize>, values: Vec<u32> },
}

impl TensorData {
    pub fn dims(&self) -> &[usize] {
        match self {
            TensorData::F32 { dims, .. } | TensorData::U32 { dims, .. } => dims,
        }
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>)> {
        match self {
            TensorData::F32 { dims, values } => Ok((dims, values)),
            TensorData::U32 { .. } => Err(Error::Format("expected f32 payload, found u32".into())),
        }
    }

    pub fn into_u32(self) -> Result<(Vec<usize>, Vec<u32>)> {
        match self {
            TensorData::U32 { dims, values } => Ok((dims, values)),
            TensorData::F32 { .. } => Err(Error::Format("expected u32 payload, found f32".into())),
        }
    }
}

pub fn encode(tensor: &TensorData) -> Result<Vec<u8>> {
    let dims = tensor.dims();
    if dims.len() > MAX_RANK {
        return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", dims.len())));
    }
    let numel: usize = dims.iter().product();
    let (flag, payload_len) = match tensor {
        TensorData::F32 { values, .. } => (0, values.len()),
        TensorData::U32 { values, .. } => (U32_FLAG, values.len()),
    };
    if payload_len != numel {
        return Err(Error::Format(format!(
            "dims {dims:?} need {numel} values, got {payload_len}"
        )));
    }
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + 4 * numel);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dims.len() as u8 | flag);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match tensor {
        TensorData::F32 { values, .. } => {
            values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        }
        TensorData::U32 { values, .. } => {
            values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorData> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing SATN magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let is_u32 = bytes[5] & U32_FLAG != 0;
    let rank = (bytes[5] & !U32_FLAG) as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated dims header".into()));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != numel * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            payload.len(),
            numel * 4
        )));
    }
    let words = payload.chunks_exact(4).map(|c| c.try_into().unwrap());
    Ok(if is_u32 {
        TensorData::U32 {
            dims,
            values: words.map(u32::from_le_bytes).collect(),
        }
    } else {
        TensorData::F32 {
            dims,
            values: words.map(f32::from_le_bytes).collect(),
        }
    })
}

pub fn write_file(path: &Path, tensor: &TensorData) -> Result<()> {
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
