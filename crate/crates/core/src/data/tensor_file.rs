//! Binary tensor files.
//!
//! Layout: the 7-byte magic `STNSR1\n`, a little-endian `u32` header length,
//! a UTF-8 JSON header `{"dtype":"f32","order":"NCHW","shape":[n,c,h,w]}`,
//! then `n*c*h*w` little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 7] = b"STNSR1\n";

#[derive(Deserialize)]
struct Header {
    dtype: String,
    order: String,
    shape: [usize; 4],
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let [n, c, h, w] = t.shape().dims();
    let header = format!(r#"{{"dtype":"f32","order":"NCHW","shape":[{n},{c},{h},{w}]}}"#);
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("bad magic, not a tensor file".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(bad("truncated before header length".into()));
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(bad(format!(
            "truncated header: need {header_len} bytes, have {}",
            rest.len()
        )));
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| bad(format!("invalid header: {e}")))?;
    if header.dtype != "f32" || header.order != "NCHW" {
        return Err(bad(format!(
            "unsupported dtype/order {}/{}",
            header.dtype, header.order
        )));
    }
    let shape = Shape::from(header.shape);
    let payload = &rest[header_len..];
    let want = shape.numel() * 4;
    if payload.len() != want {
        return Err(bad(format!(
            "payload length mismatch: shape {shape} needs {want} bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite value at element {i}")));
    }
    Tensor::from_vec(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
