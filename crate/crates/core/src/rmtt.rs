//! RMTT binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RMTT" | version: u8 = 1 | dtype: u8 | ndim: u8 | dims: ndim × u64 | data
//! ```
//!
//! `dtype` 0 is f32 LE (model tensors), 1 is u8 (pixel patches).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

pub const MAGIC: &[u8; 4] = b"RMTT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

fn header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.ndim() + 4 * t.numel());
    header(&mut out, DTYPE_F32, t.shape());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// A u8 payload; `shape` must have between 1 and 255 non-zero dims whose
/// product is `data.len()`.
pub fn encode_u8(shape: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if shape.is_empty() || shape.len() > 255 || shape.contains(&0) || checked_numel(shape) != Some(data.len()) {
        return Err(Error::Shape(format!("{} bytes for shape {shape:?}", data.len())));
    }
    let mut out = Vec::with_capacity(7 + 8 * shape.len() + data.len());
    header(&mut out, DTYPE_U8, shape);
    out.extend_from_slice(data);
    Ok(out)
}

/// Dtype, shape and payload, with the payload length checked.
pub fn decode_raw(bytes: &[u8]) -> Result<(u8, Vec<usize>, &[u8])> {
    let err = |m: &str| Error::format("rmtt", m);
    if bytes.len() < 7 {
        return Err(err("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(err("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format("rmtt", format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        _ => return Err(Error::format("rmtt", format!("unsupported dtype {dtype}"))),
    };
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(err("zero-rank tensor"));
    }
    let dims_end = 7 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(err("truncated dims"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for chunk in bytes[7..dims_end].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| err("dimension too large"))?;
        if d == 0 {
            return Err(err("zero-length dimension"));
        }
        shape.push(d);
    }
    let numel = checked_numel(&shape).ok_or_else(|| err("shape overflows"))?;
    let payload = &bytes[dims_end..];
    if numel.checked_mul(width) != Some(payload.len()) {
        return Err(Error::format(
            "rmtt",
            format!("payload has {} bytes, shape {shape:?} needs {}", payload.len(), numel.saturating_mul(width)),
        ));
    }
    Ok((dtype, shape, payload))
}

/// Decodes either dtype into an f32 tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (dtype, shape, payload) = decode_raw(bytes)?;
    if dtype == DTYPE_U8 {
        return Tensor::new(shape, payload.iter().map(|&b| f32::from(b)).collect());
    }
    let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("rmtt", "non-finite value in payload"));
    }
    Tensor::new(shape, data)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}
