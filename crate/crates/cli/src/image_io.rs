//! Binary PPM (P6) and PGM (P5) reading and writing. Pixels are 8-bit on
//! disk and `[0,1]` floats in memory.

use std::fs;
use std::path::Path;

use meafdet_core::Tensor;

use crate::error::{io_ctx, CliError, CliResult};

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str, path: &Path) -> CliResult<usize> {
        let tok = self
            .token()
            .ok_or_else(|| CliError::data(format!("{}: truncated header ({what})", path.display())))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::data(format!("{}: bad {what} in header", path.display())))
    }
}

fn read_netpbm(path: &Path, magic: &[u8], channels: usize) -> CliResult<Tensor<f32>> {
    let bytes = io_ctx(fs::read(path), &path.display().to_string())?;
    let mut p = HeaderParser::new(&bytes);
    match p.token() {
        Some(m) if m == magic => {}
        _ => {
            return Err(CliError::data(format!(
                "{}: bad magic, expected {}",
                path.display(),
                String::from_utf8_lossy(magic)
            )))
        }
    }
    let w = p.number("width", path)?;
    let h = p.number("height", path)?;
    let maxval = p.number("maxval", path)?;
    if !(1..=255).contains(&maxval) {
        return Err(CliError::data(format!(
            "{}: unsupported maxval {maxval} (8-bit only)",
            path.display()
        )));
    }
    if w == 0 || h == 0 {
        return Err(CliError::data(format!("{}: empty image", path.display())));
    }
    // exactly one whitespace byte separates the header from pixel data
    let data_start = p.pos + 1;
    let need = w * h * channels;
    if bytes.len() < data_start + need {
        return Err(CliError::data(format!(
            "{}: truncated pixel data ({} of {need} bytes)",
            path.display(),
            bytes.len().saturating_sub(data_start)
        )));
    }
    let raw = &bytes[data_start..data_start + need];
    // interleaved on disk, planar in memory
    let mut data = vec![0.0f32; need];
    let scale = 1.0 / maxval as f32;
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = raw[(y * w + x) * channels + c] as f32 * scale;
            }
        }
    }
    Tensor::new(&[channels, h, w], data).map_err(|e| CliError::data(e.to_string()))
}

/// Reads a binary RGB PPM into a `[3, H, W]` tensor.
pub fn read_ppm(path: &Path) -> CliResult<Tensor<f32>> {
    read_netpbm(path, b"P6", 3)
}

/// Reads a binary grayscale PGM into a `[1, H, W]` tensor.
pub fn read_pgm(path: &Path) -> CliResult<Tensor<f32>> {
    read_netpbm(path, b"P5", 1)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, t: &Tensor<f32>, magic: &str) -> CliResult<()> {
    let shape = t.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(t.data()[(ch * h + y) * w + x]));
            }
        }
    }
    io_ctx(fs::write(path, out), &path.display().to_string())
}

/// Writes a `[3, H, W]` tensor as binary PPM.
pub fn write_ppm(path: &Path, t: &Tensor<f32>) -> CliResult<()> {
    if t.shape().len() != 3 || t.shape()[0] != 3 {
        return Err(CliError::data(format!(
            "write_ppm: expected [3,H,W], got {:?}",
            t.shape()
        )));
    }
    write_netpbm(path, t, "P6")
}

/// Writes a `[1, H, W]` tensor as binary PGM.
pub fn write_pgm(path: &Path, t: &Tensor<f32>) -> CliResult<()> {
    if t.shape().len() != 3 || t.shape()[0] != 1 {
        return Err(CliError::data(format!(
            "write_pgm: expected [1,H,W], got {:?}",
            t.shape()
        )));
    }
    write_netpbm(path, t, "P5")
}

/// Min-max normalizes an arbitrary single-channel plane to `[0,1]` and
/// writes it as PGM. Constant planes come out black.
pub fn write_normalized_pgm(path: &Path, plane: &[f32], h: usize, w: usize) -> CliResult<()> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in plane {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let data: Vec<f32> = if range > 0.0 {
        plane.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; plane.len()]
    };
    let t = Tensor::new(&[1, h, w], data).map_err(|e| CliError::data(e.to_string()))?;
    write_pgm(path, &t)
}
