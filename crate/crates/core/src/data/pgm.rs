//! 8-bit binary PGM (P5) images, used for masks, heatmaps and sharpening
//! demos. Pixel values in `[0, 1]` map linearly onto `0..=255`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape(format!(
            "PGM export needs a 1x1xHxW image, got {s}"
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: &str| Error::format(path, reason);
    let mut pos = 0;
    if next_token(bytes, &mut pos) != Some(b"P5") {
        return Err(bad("not a binary PGM (P5) file"));
    }
    let mut number = |what: &str| -> Result<usize> {
        next_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("missing or invalid {what}")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes.get(start..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(bad(&format!(
            "raster length mismatch: {w}x{h} needs {} bytes, found {}",
            w * h,
            raster.len()
        )));
    }
    Tensor::from_vec(
        [1, 1, h, w],
        raster.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .map_err(|e| bad(&e.to_string()))
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}
