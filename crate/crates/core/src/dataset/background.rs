//! Background sources: smoothed uniform noise, crops of an image pool, or a
//! constant value. Every background is clamped to `[0, BACKGROUND_MAX]` so
//! the pasted object is the unique brightest region.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pnm::{read_pnm, GrayImage};
use crate::rng::{splitmix64, stream};
use crate::{Error, Result};

pub const BACKGROUND_MAX: f32 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundSpec {
    /// Box blur of radius `smoothing` over iid uniform noise.
    NoisePool { seed: u64, smoothing: usize },
    /// Random crops of the PGM/PPM files in a directory.
    ImageDir { path: PathBuf },
    Constant { value: f32 },
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec::NoisePool { seed: 0, smoothing: 1 }
    }
}

/// A [`BackgroundSpec`] with its image pool loaded.
#[derive(Clone, Debug)]
pub enum BackgroundSource {
    Noise { seed: u64, smoothing: usize },
    Pool(Vec<GrayImage>),
    Constant(f32),
}

impl BackgroundSource {
    pub fn load(spec: &BackgroundSpec) -> Result<BackgroundSource> {
        Ok(match spec {
            BackgroundSpec::NoisePool { seed, smoothing } => BackgroundSource::Noise {
                seed: *seed,
                smoothing: *smoothing,
            },
            BackgroundSpec::ImageDir { path } => BackgroundSource::Pool(load_pool(path)?),
            BackgroundSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::config("constant background must be finite"));
                }
                BackgroundSource::Constant(*value)
            }
        })
    }

    /// A `height x width` background, row-major, in `[0, BACKGROUND_MAX]`.
    pub fn generate<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Vec<f32> {
        let mut img = match self {
            BackgroundSource::Noise { seed, smoothing } => {
                let mut noise_rng = stream(splitmix64(*seed, rng.gen()));
                let raw: Vec<f32> = (0..height * width).map(|_| noise_rng.gen::<f32>()).collect();
                box_blur(&raw, height, width, *smoothing)
            }
            BackgroundSource::Pool(pool) => {
                let src = &pool[rng.gen_range(0..pool.len())];
                let window = crop_window((src.height, src.width), (height, width), rng);
                resample(src, window, height, width)
            }
            BackgroundSource::Constant(v) => vec![*v; height * width],
        };
        for v in &mut img {
            *v = v.clamp(0.0, BACKGROUND_MAX);
        }
        img
    }
}

fn load_pool(dir: &Path) -> Result<Vec<GrayImage>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!("no PGM/PPM images in {}", dir.display())));
    }
    paths.iter().map(|p| read_pnm(p)).collect()
}

/// Mean over the `(2r+1)^2` window, restricted to in-bounds pixels.
pub fn box_blur(img: &[f32], height: usize, width: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return img.to_vec();
    }
    let pass = |src: &[f32], along_rows: bool| {
        let mut out = vec![0.0f32; src.len()];
        let (lines, len) = if along_rows { (height, width) } else { (width, height) };
        let at = |line: usize, k: usize| if along_rows { line * width + k } else { k * width + line };
        for line in 0..lines {
            for k in 0..len {
                let lo = k.saturating_sub(radius);
                let hi = (k + radius).min(len - 1);
                let sum: f32 = (lo..=hi).map(|j| src[at(line, j)]).sum();
                out[at(line, k)] = sum / (hi - lo + 1) as f32;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Crop `(y0, x0, crop_h, crop_w)` with the target aspect ratio, between half
/// and all of the largest such crop that fits in the source.
pub fn crop_window<R: Rng + ?Sized>(
    source: (usize, usize),
    target: (usize, usize),
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let ((sh, sw), (th, tw)) = (source, target);
    let k_max = (sh as f64 / th as f64).min(sw as f64 / tw as f64);
    let k = rng.gen_range(0.5 * k_max..=k_max);
    let ch = ((k * th as f64).round() as usize).clamp(1, sh);
    let cw = ((k * tw as f64).round() as usize).clamp(1, sw);
    let y0 = rng.gen_range(0..=sh - ch);
    let x0 = rng.gen_range(0..=sw - cw);
    (y0, x0, ch, cw)
}

/// Bilinear resampling of a source window to `height x width`.
fn resample(src: &GrayImage, window: (usize, usize, usize, usize), height: usize, width: usize) -> Vec<f32> {
    let (y0, x0, ch, cw) = window;
    let coord = |i: usize, out: usize, size: usize| {
        let c = ((i as f64 + 0.5) * size as f64 / out as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(size - 1), (c - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        let (ya, yb, fy) = coord(i, height, ch);
        for j in 0..width {
            let (xa, xb, fx) = coord(j, width, cw);
            let p = |y: usize, x: usize| src.at(y0 + y, x0 + x);
            let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
            let bottom = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
