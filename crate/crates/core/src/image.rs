//! Binary PPM (P6, 8-bit) reading and writing.

use std::fs;
use std::path::Path;

use mznet_tensor::{Shape, Tensor};

use crate::error::{Error, Result};

/// [0, 1] value to a byte, rounding half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1×3×H×W tensor as P6 bytes.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Config(format!("PPM needs a 1x3xHxW image, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(3 * s.h * s.w);
    for i in 0..s.h {
        for j in 0..s.w {
            for c in 0..3 {
                out.push(quantize(img.at(0, c, i, j)));
            }
        }
    }
    Ok(out)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

/// Decodes P6 bytes into a 1×3×H×W tensor in [0, 1].
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut pos = 2;
    let w = header_token(bytes, &mut pos).ok_or_else(|| bad("bad width"))?;
    let h = header_token(bytes, &mut pos).ok_or_else(|| bad("bad height"))?;
    let maxval = header_token(bytes, &mut pos).ok_or_else(|| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("empty image"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after header"));
    }
    let data = &bytes[pos + 1..];
    if data.len() < 3 * w * h {
        return Err(bad("truncated pixel data"));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, i, j| {
        data[3 * (i * w + j) + c] as f64 / 255.0
    }))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_ppm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
