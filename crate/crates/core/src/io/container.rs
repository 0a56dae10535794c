use std::path::Path;

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXC1";
pub const DTYPE_F32: u32 = 0;

/// Serializes an array: magic, `ndim`, dims, dtype code (all little-endian
/// `u32`), then the row-major `f32` payload.
pub fn encode_array(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| Error::Data("truncated array container".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Data("bad container magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let ndim = u32_at(take(4)?) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Data(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32_at(take(4)?) as usize);
    }
    let dtype = u32_at(take(4)?);
    if dtype != DTYPE_F32 {
        return Err(Error::Data(format!("unsupported dtype code {dtype}")));
    }
    let n: usize = shape.iter().product();
    let payload = take(n * 4)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if pos != bytes.len() {
        return Err(Error::Data("trailing bytes after array payload".into()));
    }
    Tensor::new(shape, data).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_array(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_array(t))?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_array(&std::fs::read(path)?)
}
