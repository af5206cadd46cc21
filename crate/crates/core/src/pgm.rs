//! Portable graymap (PGM) reading and writing. Samples are mapped to `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// Decodes binary (`P5`) or ASCII (`P2`) graymaps, 8 or 16 bit.
pub fn decode(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let err = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
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
        (pos > start).then(|| &bytes[start..pos])
    };
    let magic = token().ok_or_else(|| err("empty file"))?.to_vec();
    let mut number = |what: &str| -> Result<usize> {
        let t = token().ok_or_else(|| err(&format!("missing {what}")))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(&format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(err("invalid header values"));
    }
    let n = width * height;
    let scale = maxval as f64;
    let pixels = match magic.as_slice() {
        b"P5" => {
            // exactly one whitespace byte separates the header from the raster
            let start = pos + 1;
            let bpp = if maxval < 256 { 1 } else { 2 };
            let raster = bytes
                .get(start..start + n * bpp)
                .ok_or_else(|| err("truncated raster"))?;
            if bpp == 1 {
                raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
            } else {
                raster
                    .chunks(2)
                    .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f64 / scale).min(1.0))
                    .collect()
            }
        }
        b"P2" => (0..n)
            .map(|_| number("sample").map(|v| (v as f64 / scale).min(1.0)))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(err("not a P2/P5 graymap")),
    };
    Ok(GrayImage {
        height,
        width,
        pixels,
    })
}

/// Encodes as binary `P5` with the given bit depth (8 or 16). Values are clipped to `[0, 1]`.
pub fn encode(img: &GrayImage, bits: u8) -> Vec<u8> {
    let maxval: u32 = if bits > 8 { 65535 } else { 255 };
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    for &v in &img.pixels {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if maxval > 255 {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    out
}

pub fn read(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &GrayImage, bits: u8) -> Result<()> {
    fs::write(path, encode(img, bits)).map_err(|e| Error::io(path, e))
}
