//! `LFTD` tensor dumps: magic, `u32` rank, `u32` extents, `f32` payload,
//! all little-endian, row-major.

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFTD";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes one record from the front of `bytes`; returns it and the bytes consumed.
/// `path` and `base` only label error offsets.
pub fn decode(bytes: &[u8], path: &Path, base: u64) -> Result<(Tensor, usize)> {
    let err = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: base + offset as u64,
        detail,
    };
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| err(off, "truncated header".into()))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(err(0, "missing LFTD magic".into()));
    }
    let rank = u32_at(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(8 + 4 * i)? as usize);
    }
    let start = 8 + 4 * rank;
    let len: usize = shape.iter().product();
    let end = start + 4 * len;
    let payload = bytes
        .get(start..end)
        .ok_or_else(|| err(bytes.len(), format!("payload needs {} bytes, {} available", 4 * len, bytes.len().saturating_sub(start))))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| err(4, e.to_string()))?;
    Ok((t, end))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes, path, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: used as u64,
            detail: "trailing bytes after tensor".into(),
        });
    }
    Ok(t)
}
