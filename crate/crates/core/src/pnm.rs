//! Netpbm images: reads plain and binary PGM/PPM (P2, P3, P5, P6), writes
//! binary PGM (P5).

use std::path::Path;

use crate::{Error, Result};

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<GrayImage> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("PNM", reason)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad(format!("expected a number at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| bad("number out of range"))
    }
}

pub fn parse_pnm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("missing P magic"));
    }
    let kind = bytes[1];
    let channels = match kind {
        b'2' | b'5' => 1,
        b'3' | b'6' => 3,
        _ => return Err(bad(format!("unsupported magic P{}", kind as char))),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} outside 1..=65535")));
    }
    let samples = width * height * channels;
    let raw: Vec<usize> = if kind == b'2' || kind == b'3' {
        (0..samples).map(|_| h.number()).collect::<Result<_>>()?
    } else {
        // Exactly one whitespace byte separates the header from the raster.
        if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
            return Err(bad("missing whitespace after header"));
        }
        let data = &bytes[h.pos + 1..];
        let width_bytes = if maxval > 255 { 2 } else { 1 };
        if data.len() < samples * width_bytes {
            return Err(bad(format!(
                "raster has {} bytes, expected {}",
                data.len(),
                samples * width_bytes
            )));
        }
        if width_bytes == 1 {
            data[..samples].iter().map(|&b| b as usize).collect()
        } else {
            data[..samples * 2]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
                .collect()
        }
    };
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(bad(format!("sample {v} exceeds maxval {maxval}")));
    }
    let scale = maxval as f32;
    let pixels = if channels == 1 {
        raw.iter().map(|&v| v as f32 / scale).collect()
    } else {
        raw.chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / scale)
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    };
    GrayImage::new(width, height, pixels)
}

pub fn read_pnm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|e| match e {
        Error::Format { format, reason } => Error::Format {
            format,
            reason: format!("{}: {reason}", path.display()),
        },
        e => e,
    })
}

/// Binary PGM with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Maps `[0, 1]` to `0..=255`, clamping out-of-range values.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Scales values so the maximum maps to 255; an all-zero input stays zero.
pub fn scale_to_u8(values: &[f64]) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (v.max(0.0) / max * 255.0).round() as u8)
        .collect()
}
