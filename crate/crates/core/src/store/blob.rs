//! `VZT1` tensor blobs.
//!
//! Little-endian throughout:
//!
//! ```text
//! 0    4 bytes  magic "VZT1"
//! 4    1 byte   dtype (1 = f32, 2 = f64, 3 = i64, 4 = u8)
//! 5    1 byte   ndim
//! 6    8*ndim   extents, u64 each
//! ...           row-major payload
//! ```

use std::path::Path;

use super::{io_err, StoreError};
use crate::tensor::{DType, Storage, Tensor};

pub const MAGIC: &[u8; 4] = b"VZT1";

pub fn dtype_code(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => 1,
        DType::F64 => 2,
        DType::I64 => 3,
        DType::U8 => 4,
    }
}

fn dtype_from_code(code: u8) -> Option<DType> {
    Some(match code {
        1 => DType::F32,
        2 => DType::F64,
        3 => DType::I64,
        4 => DType::U8,
        _ => return None,
    })
}

fn element_size(dtype: DType) -> usize {
    match dtype {
        DType::F32 => 4,
        DType::F64 | DType::I64 => 8,
        DType::U8 => 1,
    }
}

/// Appends the encoded blob to `out`.
pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.reserve(6 + 8 * t.ndim() + t.len() * element_size(t.dtype()));
    out.extend_from_slice(MAGIC);
    out.push(dtype_code(t.dtype()));
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.storage() {
        Storage::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::U8(v) => out.extend_from_slice(v),
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

fn format_err<T>(offset: u64, detail: impl Into<String>) -> Result<T, StoreError> {
    Err(StoreError::Format {
        offset,
        detail: detail.into(),
    })
}

/// Decodes one blob from the start of `bytes`, returning the tensor and the number of
/// bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize), StoreError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return format_err(0, "missing VZT1 magic");
    }
    if bytes.len() < 6 {
        return format_err(bytes.len() as u64, "truncated header");
    }
    let dtype = match dtype_from_code(bytes[4]) {
        Some(d) => d,
        None => return format_err(4, format!("unknown dtype code {}", bytes[4])),
    };
    let ndim = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let Some(chunk) = bytes.get(pos..pos + 8) else {
            return format_err(bytes.len() as u64, "truncated extents");
        };
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| StoreError::Format {
            offset: pos as u64,
            detail: format!("extent {d} too large"),
        })?);
        pos += 8;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(element_size(dtype)));
    let Some(nbytes) = numel else {
        return format_err(6, "declared size overflows");
    };
    let Some(payload) = bytes.get(pos..pos + nbytes) else {
        return format_err(
            bytes.len() as u64,
            format!("payload needs {nbytes} bytes from offset {pos}"),
        );
    };
    let data = match dtype {
        DType::F32 => Storage::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => Storage::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I64 => Storage::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => Storage::U8(payload.to_vec()),
    };
    let t = Tensor::new(shape, data).expect("payload length checked above");
    Ok((t, pos + nbytes))
}

/// Decodes a buffer holding exactly one blob.
pub fn decode(bytes: &[u8]) -> Result<Tensor, StoreError> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return format_err(used as u64, format!("{} trailing bytes", bytes.len() - used));
    }
    Ok(t)
}

pub fn write_blob(path: &Path, t: &Tensor) -> Result<(), StoreError> {
    std::fs::write(path, encode(t)).map_err(|e| io_err(path, e))
}

pub fn read_blob(path: &Path) -> Result<Tensor, StoreError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes)
}
