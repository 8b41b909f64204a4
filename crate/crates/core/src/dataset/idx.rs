//! IDX container (the MNIST distribution format): a magic of `00 00 08 nd`
//! (unsigned bytes, `nd` dimensions), `nd` big-endian u32 sizes, then the
//! payload.

use std::path::Path;

use super::GlyphSet;
use crate::{Error, Result};

/// Decoded IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// Pixels scaled to `[0, 1]` by `/255`, image-major.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f32>,
    },
    Labels(Vec<u8>),
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("IDX", reason)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(bad("file shorter than the magic number"));
    }
    if bytes[..3] != [0x00, 0x00, 0x08] {
        return Err(bad(format!(
            "bad magic {:02x} {:02x} {:02x} (expected 00 00 08)",
            bytes[0], bytes[1], bytes[2]
        )));
    }
    let nd = bytes[3] as usize;
    if nd != 1 && nd != 3 {
        return Err(bad(format!(
            "expected 1 (labels) or 3 (images) dimensions, got {nd}"
        )));
    }
    let header = 4 + 4 * nd;
    if bytes.len() < header {
        return Err(bad("truncated dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dimension product overflows"))?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload has {} bytes, dimensions {dims:?} need {expected}",
            payload.len()
        )));
    }
    Ok(if nd == 1 {
        IdxData::Labels(payload.to_vec())
    } else {
        IdxData::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: payload.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    })
}

/// Encodes IDX bytes; the inverse of [`parse_idx`] for fixtures and tests.
pub fn encode_idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

impl GlyphSet {
    /// Pairs an IDX image file with its IDX label file.
    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<GlyphSet> {
        let (count, rows, cols, pixels) = match parse_idx(images)? {
            IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            } => (count, rows, cols, pixels),
            IdxData::Labels(_) => return Err(bad("expected an image file, found labels")),
        };
        let labels = match parse_idx(labels)? {
            IdxData::Labels(l) => l,
            IdxData::Images { .. } => return Err(bad("expected a label file, found images")),
        };
        if rows != cols {
            return Err(bad(format!("glyphs must be square, got {rows}x{cols}")));
        }
        if labels.len() != count {
            return Err(bad(format!(
                "{count} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 9) {
            return Err(bad(format!("digit label {l} out of range")));
        }
        let g = rows;
        let images = pixels.chunks_exact(g * g).map(|c| c.to_vec()).collect();
        GlyphSet::new(g, images, labels)
    }

    pub fn from_idx_files(images: &Path, labels: &Path) -> Result<GlyphSet> {
        let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
        GlyphSet::from_idx(&read(images)?, &read(labels)?)
    }
}
