//! Binary greyscale images (PGM `P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::dim(
            "pgm",
            format!("{} pixels for {width} x {height}", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| Error::Format(format!("bad PGM {what} {t:?}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval {maxval}, expected 255")));
    }
    let start = pos + 1;
    let end = start + width * height;
    if bytes.len() != end {
        return Err(Error::Format(format!(
            "PGM payload for {width} x {height} needs {} bytes, has {}",
            width * height,
            bytes.len().saturating_sub(start)
        )));
    }
    Ok((width, height, bytes[start..end].to_vec()))
}

fn plane<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        [d, h, w] => Ok((*d * *h, *w)),
        s => Err(Error::dim(
            "pgm",
            format!("expected a 2D image or a slice stack, got {s:?}"),
        )),
    }
}

/// Binary mask to 0/255 pixels; a `D x H x W` stack is written as a
/// `(D * H) x W` image. Non-binary values are rejected.
pub fn write_mask_pgm<T: Real>(path: impl AsRef<Path>, mask: &Tensor<T>) -> Result<()> {
    let (h, w) = plane(mask)?;
    let mut px = Vec::with_capacity(mask.len());
    for &v in mask.data() {
        px.push(if v == T::one() {
            255
        } else if v == T::zero() {
            0
        } else {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        });
    }
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(w, h, &px)?).map_err(|e| Error::io(path, e))
}

/// Reads a mask written by [`write_mask_pgm`] as `H x W` 0/1 values.
pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, px) = decode_pgm(&bytes)?;
    let data = px
        .iter()
        .map(|&p| match p {
            0 => Ok(0.0),
            255 => Ok(1.0),
            other => Err(Error::Validation(format!(
                "{}: mask pixel {other} is not 0 or 255",
                path.display()
            ))),
        })
        .collect::<Result<Vec<f32>>>()?;
    Tensor::new(&[h, w], data)
}

/// Linear map of `[lo, hi]` onto 0..255 (clamped) for visual inspection.
pub fn write_gray_pgm<T: Real>(path: impl AsRef<Path>, image: &Tensor<T>, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = plane(image)?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px: Vec<u8> = image
        .data()
        .iter()
        .map(|v| ((v.as_f64() - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(w, h, &px)?).map_err(|e| Error::io(path, e))
}
