//! Gradient saliency and saliency-shift difference maps.
//!
//! The saliency score of a sample is the mean true-class logit over its
//! object mask; the map is the absolute input gradient of that score. A
//! saliency-shift map compares the map of a centered crop against crops whose
//! window moved over a larger canvas, after aligning both in object
//! coordinates.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{composite_sample, BackgroundSource, Sample, MASK_THRESHOLD};
use crate::pnm::{scale_to_u8, write_pgm};
use crate::rng::stream;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::unet::{Model, Tape};
use crate::{Error, Result};

/// A network that exposes logits and the input gradient of a logit-space
/// cotangent.
pub trait Differentiable<T: Scalar>: Sync {
    type Tape;

    fn forward_logits(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Self::Tape)>;

    fn input_gradient(&self, tape: &Self::Tape, grad_logits: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Random padding draws from a fixed stream so maps are reproducible.
impl<T: Scalar> Differentiable<T> for Model<T> {
    type Tape = Tape<T>;

    fn forward_logits(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.forward(input, &mut stream(0))
    }

    fn input_gradient(&self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backward(tape, grad_logits)?.input)
    }
}

/// `H x W` absolute input gradient, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Saliency of the mean true-class logit over the object mask of `sample`.
pub fn saliency_map<T: Scalar, M: Differentiable<T>>(model: &M, sample: &Sample) -> Result<SaliencyMap> {
    let (h, w) = (sample.height(), sample.width());
    let mask: Vec<usize> = (0..h * w).filter(|&k| sample.target[k] != 0).collect();
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let input: Tensor<T> = sample.input.cast();
    let (logits, tape) = model.forward_logits(&input)?;
    let classes = logits.shape().c;
    let mut grad = Tensor::<T>::zeros(logits.shape());
    let weight = T::of(1.0 / mask.len() as f64);
    for &k in &mask {
        let class = sample.target[k] as usize;
        if class >= classes {
            return Err(Error::invalid(format!("target class {class} but the model has {classes} outputs")));
        }
        grad.data_mut()[class * h * w + k] = weight;
    }
    let g = model.input_gradient(&tape, &grad)?;
    if g.shape() != Shape::new(1, 1, h, w) {
        return Err(Error::shape(format!("input gradient has shape {}", g.shape())));
    }
    Ok(SaliencyMap {
        height: h,
        width: w,
        values: g.data().iter().map(|v| v.as_f64().abs()).collect(),
    })
}

/// Symmetric grid of integer shifts `k * stride` with `|dx| <= extent_x`,
/// `|dy| <= extent_y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftGrid {
    pub extent_x: usize,
    pub extent_y: usize,
    pub stride: usize,
}

impl ShiftGrid {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("shift grid stride must be positive"));
        }
        Ok(())
    }

    pub fn xs(&self) -> Vec<i64> {
        axis(self.extent_x, self.stride)
    }

    pub fn ys(&self) -> Vec<i64> {
        axis(self.extent_y, self.stride)
    }

    /// Chebyshev distance of a shift relative to the extents.
    pub fn r(&self, dx: i64, dy: i64) -> f64 {
        let rel = |d: i64, e: usize| if e == 0 { 0.0 } else { d.abs() as f64 / e as f64 };
        rel(dx, self.extent_x).max(rel(dy, self.extent_y))
    }
}

fn axis(extent: usize, stride: usize) -> Vec<i64> {
    let k = (extent / stride) as i64;
    (-k..=k).map(|i| i * stride as i64).collect()
}

/// A glyph pasted at the center of a background canvas larger than the crop
/// window by the grid extent on every side.
#[derive(Clone, Debug)]
pub struct CanvasScene {
    pub canvas: Sample,
    pub crop_height: usize,
    pub crop_width: usize,
    pub grid: ShiftGrid,
    pub glyph_size: usize,
}

impl CanvasScene {
    pub fn new<R: Rng + ?Sized>(
        glyph: &[f32],
        digit_class: u8,
        background: &BackgroundSource,
        crop: (usize, usize),
        grid: ShiftGrid,
        rng: &mut R,
    ) -> Result<CanvasScene> {
        grid.validate()?;
        let (crop_height, crop_width) = crop;
        let g = (glyph.len() as f64).sqrt() as usize;
        if g * g != glyph.len() || g == 0 {
            return Err(Error::shape(format!("glyph with {} pixels is not square", glyph.len())));
        }
        if crop_height < g || crop_width < g {
            return Err(Error::invalid("crop smaller than the glyph"));
        }
        let (mx, my) = ((crop_width - g) / 2, (crop_height - g) / 2);
        if grid.extent_x > mx || grid.extent_y > my {
            return Err(Error::invalid(format!(
                "grid extent ({}, {}) would move the glyph out of the crop (max ({mx}, {my}))",
                grid.extent_x, grid.extent_y
            )));
        }
        if !glyph.iter().any(|&v| v > MASK_THRESHOLD) {
            return Err(Error::EmptyMask);
        }
        let (ch, cw) = (crop_height + 2 * grid.extent_y, crop_width + 2 * grid.extent_x);
        let bg = background.generate(ch, cw, rng);
        let canvas = composite_sample(glyph, digit_class, &bg, ch, cw, (0, 0))?;
        Ok(CanvasScene {
            canvas,
            crop_height,
            crop_width,
            grid,
            glyph_size: g,
        })
    }

    /// The crop in which the object appears displaced by `(dx, dy)` from the
    /// centered position. The window itself moves by `(-dx, -dy)`.
    pub fn crop(&self, dx: i64, dy: i64) -> Result<Sample> {
        let (h, w) = (self.crop_height, self.crop_width);
        let cw = self.canvas.width();
        let y0 = self.grid.extent_y as i64 - dy;
        let x0 = self.grid.extent_x as i64 - dx;
        if y0 < 0 || x0 < 0 || y0 as usize + h > self.canvas.height() || x0 as usize + w > cw {
            return Err(Error::invalid(format!("shift ({dx}, {dy}) leaves the canvas")));
        }
        let (y0, x0) = (y0 as usize, x0 as usize);
        let mut input = Vec::with_capacity(h * w);
        let mut target = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            input.extend_from_slice(&self.canvas.input.data()[y * cw + x0..y * cw + x0 + w]);
            target.extend_from_slice(&self.canvas.target[y * cw + x0..y * cw + x0 + w]);
        }
        let mut meta = self.canvas.meta.clone();
        let g = self.glyph_size;
        meta.offset = (dx, dy);
        meta.r = crate::dataset::normalized_offset(dx, dy, (h, w), (g, g))?;
        meta.bbox = meta.bbox.map(|b| crate::dataset::BBox {
            x: b.x - x0,
            y: b.y - y0,
            ..b
        });
        Ok(Sample {
            input: Tensor::from_vec(Shape::new(1, 1, h, w), input)?,
            target,
            meta,
        })
    }
}

/// Mean of `|a(i, j) - b(i + dy, j + dx)|` over the pixels where both are
/// defined.
pub fn aligned_difference(a: &SaliencyMap, b: &SaliencyMap, dx: i64, dy: i64) -> f64 {
    let (h, w) = (a.height as i64, a.width as i64);
    let (ys, ye) = ((-dy).max(0), (h - dy).min(h));
    let (xs, xe) = ((-dx).max(0), (w - dx).min(w));
    if ys >= ye || xs >= xe {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in ys..ye {
        for j in xs..xe {
            sum += (a.at(i as usize, j as usize) - b.at((i + dy) as usize, (j + dx) as usize)).abs();
        }
    }
    sum / ((ye - ys) * (xe - xs)) as f64
}

/// Result of [`dispersion_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub std: f64,
    /// `false` when the standard deviation was 0 and the input was returned.
    pub normalized: bool,
}

/// Divides by the population standard deviation.
pub fn dispersion_normalize(values: &[f64]) -> Normalized {
    let n = values.len() as f64;
    let std = if values.is_empty() {
        0.0
    } else {
        let mean = values.iter().sum::<f64>() / n;
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    };
    if std > 0.0 && std.is_finite() {
        Normalized {
            values: values.iter().map(|v| v / std).collect(),
            std,
            normalized: true,
        }
    } else {
        Normalized {
            values: values.to_vec(),
            std,
            normalized: false,
        }
    }
}

/// Difference matrix over a shift grid; row `i` is `dy = ys[i]`, column `j`
/// is `dx = xs[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyShiftMap {
    pub grid: ShiftGrid,
    pub xs: Vec<i64>,
    pub ys: Vec<i64>,
    pub raw: Vec<f64>,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl SaliencyShiftMap {
    pub fn rows(&self) -> usize {
        self.ys.len()
    }

    pub fn cols(&self) -> usize {
        self.xs.len()
    }

    pub fn raw_at(&self, dx: i64, dy: i64) -> Option<f64> {
        let j = self.xs.iter().position(|&v| v == dx)?;
        let i = self.ys.iter().position(|&v| v == dy)?;
        Some(self.raw[i * self.cols() + j])
    }

    /// Mean value over entries with `r > 0.8` divided by the mean over
    /// entries with `r < 0.2`.
    pub fn ring_ratio(&self) -> Option<f64> {
        let (mut outer, mut inner) = ((0.0, 0usize), (0.0, 0usize));
        for (i, &dy) in self.ys.iter().enumerate() {
            for (j, &dx) in self.xs.iter().enumerate() {
                let v = self.values[i * self.cols() + j];
                let r = self.grid.r(dx, dy);
                if r > 0.8 {
                    outer = (outer.0 + v, outer.1 + 1);
                } else if r < 0.2 {
                    inner = (inner.0 + v, inner.1 + 1);
                }
            }
        }
        if outer.1 == 0 || inner.1 == 0 || inner.0 == 0.0 {
            return None;
        }
        Some((outer.0 / outer.1 as f64) / (inner.0 / inner.1 as f64))
    }

    /// One line per `dy`, comma-separated, with a leading `dy\dx` header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dy\\dx");
        for dx in &self.xs {
            out.push_str(&format!(",{dx}"));
        }
        out.push('\n');
        for (i, dy) in self.ys.iter().enumerate() {
            out.push_str(&dy.to_string());
            for v in &self.values[i * self.cols()..(i + 1) * self.cols()] {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, csv: &Path, pgm: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        write_pgm(pgm, self.cols(), self.rows(), &scale_to_u8(&self.values))
    }
}

pub fn saliency_shift_map<T: Scalar, M: Differentiable<T>>(model: &M, scene: &CanvasScene) -> Result<SaliencyShiftMap> {
    let grid = scene.grid;
    grid.validate()?;
    let (xs, ys) = (grid.xs(), grid.ys());
    let s0 = saliency_map(model, &scene.crop(0, 0)?)?;
    let shifts: Vec<(i64, i64)> = ys.iter().flat_map(|&dy| xs.iter().map(move |&dx| (dx, dy))).collect();
    let raw: Vec<f64> = shifts
        .par_iter()
        .map(|&(dx, dy)| {
            if (dx, dy) == (0, 0) {
                return Ok(0.0);
            }
            let s = saliency_map(model, &scene.crop(dx, dy)?)?;
            Ok(aligned_difference(&s0, &s, dx, dy))
        })
        .collect::<Result<_>>()?;
    let norm = dispersion_normalize(&raw);
    if !norm.normalized {
        log::warn!("saliency-shift matrix has zero dispersion; values left unnormalized");
    }
    Ok(SaliencyShiftMap {
        grid,
        xs,
        ys,
        raw,
        values: norm.values,
        normalized: norm.normalized,
    })
}
