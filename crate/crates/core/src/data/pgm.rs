//! Binary PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

/// Raw decoded raster before any resizing.
#[derive(Debug, Clone)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    /// Samples scaled to `[0, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.samples.iter().map(|&s| s as f64 / m).collect()
    }
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

pub fn decode(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let bad = |m: &str| Error::format(path, m);
    let mut pos = 0;
    if next_token(bytes, &mut pos) != Some(b"P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| bad(what))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(what))
    };
    let width = num("bad width")?;
    let height = num("bad height")?;
    let maxval = num("bad maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad header values"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(bad("truncated raster"));
    }
    let raster = &bytes[pos..pos + need];
    let samples: Vec<u16> = if wide {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// P5 bytes with maxval 255; each value is `round(clamp(v) * 255)`.
pub fn encode(img: &GrayImage) -> Vec<u8> {
    let s = img.side();
    let mut out = format!("P5\n{s} {s}\n255\n").into_bytes();
    out.extend(
        img.pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}
