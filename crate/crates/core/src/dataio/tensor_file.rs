//! Raw tensor container.
//!
//! Layout: `b"TCNT"`, version byte `1`, dtype byte `0` (32-bit float), rank
//! byte, one reserved zero byte, `rank` extents as little-endian `u32`, then
//! the row-major payload as little-endian `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCNT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode_tensor(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, rank, 0]);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!("header needs 8 bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let body = 8 + 4 * rank;
    if bytes.len() < body {
        return Err(Error::Format(format!(
            "truncated header: rank {rank} needs {body} bytes"
        )));
    }
    let shape: Vec<usize> = bytes[8..body]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(body))
        .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload for extents {shape:?} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
