//! Object-position heatmaps from COCO-style detection annotations.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pnm::{scale_to_u8, write_pgm};
use crate::{Error, Result};

pub const DEFAULT_GRID: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: f64,
    pub height: f64,
}

/// A box already clipped to its image, with positive area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    /// Annotations removed because nothing was left after clipping.
    pub dropped: usize,
}

#[derive(Deserialize)]
struct RawSet {
    images: Vec<ImageInfo>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

pub fn parse_annotations(bytes: &[u8]) -> Result<AnnotationSet> {
    let raw: RawSet = serde_json::from_slice(bytes)?;
    let mut dims = HashMap::with_capacity(raw.images.len());
    for img in &raw.images {
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(Error::format("COCO", format!("image {} has non-positive size", img.id)));
        }
        if dims.insert(img.id, (img.width, img.height)).is_some() {
            return Err(Error::format("COCO", format!("duplicate image id {}", img.id)));
        }
    }
    let mut annotations = Vec::with_capacity(raw.annotations.len());
    let mut dropped = 0;
    for a in raw.annotations {
        let &(iw, ih) = dims.get(&a.image_id).ok_or_else(|| {
            Error::format("COCO", format!("annotation references unknown image {}", a.image_id))
        })?;
        if a.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("COCO", format!("non-finite bbox in image {}", a.image_id)));
        }
        let [x, y, w, h] = a.bbox;
        let (x0, y0) = (x.max(0.0), y.max(0.0));
        let (x1, y1) = ((x + w).min(iw), (y + h).min(ih));
        if x1 <= x0 || y1 <= y0 {
            dropped += 1;
            continue;
        }
        annotations.push(Annotation {
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: [x0, y0, x1 - x0, y1 - y0],
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} annotations with empty boxes after clipping");
    }
    Ok(AnnotationSet {
        images: raw.images,
        annotations,
        categories: raw.categories,
        dropped,
    })
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&bytes)
}

impl AnnotationSet {
    /// Finds a category by exact name, case-insensitive name, or numeric id.
    pub fn category(&self, key: &str) -> Result<&Category> {
        self.categories
            .iter()
            .find(|c| c.name == key)
            .or_else(|| self.categories.iter().find(|c| c.name.eq_ignore_ascii_case(key)))
            .or_else(|| {
                key.parse::<u64>()
                    .ok()
                    .and_then(|id| self.categories.iter().find(|c| c.id == id))
            })
            .ok_or_else(|| Error::UnknownCategory(key.to_string()))
    }

    pub fn count(&self, category_id: u64) -> usize {
        self.annotations.iter().filter(|a| a.category_id == category_id).count()
    }

    fn normalized_boxes(&self, category_id: u64) -> Vec<[f64; 4]> {
        let dims: HashMap<u64, (f64, f64)> = self.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
        self.annotations
            .iter()
            .filter(|a| a.category_id == category_id)
            .map(|a| {
                let (w, h) = dims[&a.image_id];
                let [x, y, bw, bh] = a.bbox;
                [x / w, y / h, (x + bw) / w, (y + bh) / h]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapMode {
    Centroid,
    BBox,
}

impl fmt::Display for HeatmapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeatmapMode::Centroid => "centroid",
            HeatmapMode::BBox => "bbox",
        })
    }
}

/// `G x G` count grid, row-major with row = vertical cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: usize,
    pub counts: Vec<u64>,
    pub mode: HeatmapMode,
    pub category: String,
    /// Annotations that contributed.
    pub total_count: usize,
}

impl Heatmap {
    pub fn at(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.grid + col]
    }

    pub fn sum(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Values divided by the maximum; an all-zero map stays zero.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        if max == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / max as f64).collect()
    }

    /// Mean of the outermost ring of cells divided by the mean of all cells.
    /// `None` for an empty map.
    pub fn outer_ring_ratio(&self) -> Option<f64> {
        let g = self.grid;
        let total = self.sum();
        if total == 0 {
            return None;
        }
        let ring: Vec<u64> = (0..g * g)
            .filter(|&k| {
                let (r, c) = (k / g, k % g);
                r == 0 || c == 0 || r == g - 1 || c == g - 1
            })
            .map(|k| self.counts[k])
            .collect();
        let ring_mean = ring.iter().sum::<u64>() as f64 / ring.len() as f64;
        Some(ring_mean / (total as f64 / (g * g) as f64))
    }
}

fn cell(u: f64, g: usize) -> usize {
    ((u * g as f64).floor().max(0.0) as usize).min(g - 1)
}

fn accumulate(boxes: &[[f64; 4]], g: usize, add: impl Fn(&[f64; 4], &mut [u64]) + Sync) -> Vec<u64> {
    boxes
        .par_chunks(4096)
        .map(|chunk| {
            let mut grid = vec![0u64; g * g];
            for b in chunk {
                add(b, &mut grid);
            }
            grid
        })
        .reduce(
            || vec![0u64; g * g],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        )
}

fn check_grid(g: usize) -> Result<()> {
    if g == 0 {
        Err(Error::invalid("heatmap grid must be at least 1"))
    } else {
        Ok(())
    }
}

/// One count per annotation at the cell holding its normalized box center.
pub fn centroid_heatmap(set: &AnnotationSet, category: &str, g: usize) -> Result<Heatmap> {
    check_grid(g)?;
    let cat = set.category(category)?;
    let boxes = set.normalized_boxes(cat.id);
    let counts = accumulate(&boxes, g, |b, grid| {
        let (u, v) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        grid[cell(v, g) * g + cell(u, g)] += 1;
    });
    Ok(Heatmap {
        grid: g,
        counts,
        mode: HeatmapMode::Centroid,
        category: cat.name.clone(),
        total_count: boxes.len(),
    })
}

/// One count per annotation on every cell whose center lies in the
/// normalized box `[x0, x1) x [y0, y1)`.
pub fn bbox_heatmap(set: &AnnotationSet, category: &str, g: usize) -> Result<Heatmap> {
    check_grid(g)?;
    let cat = set.category(category)?;
    let boxes = set.normalized_boxes(cat.id);
    let counts = accumulate(&boxes, g, |b, grid| {
        let centers = |lo: f64, hi: f64| {
            // Cells i with lo <= (i + 0.5) / g < hi.
            let first = ((lo * g as f64 - 0.5).ceil().max(0.0)) as usize;
            (first..g).take_while(move |&i| (i as f64 + 0.5) / (g as f64) < hi)
        };
        for r in centers(b[1], b[3]) {
            for c in centers(b[0], b[2]) {
                grid[r * g + c] += 1;
            }
        }
    });
    Ok(Heatmap {
        grid: g,
        counts,
        mode: HeatmapMode::BBox,
        category: cat.name.clone(),
        total_count: boxes.len(),
    })
}

/// Writes a P5 image scaled so the grid maximum maps to 255, plus the raw
/// counts as CSV next to it. Returns the CSV path.
pub fn write_heatmap_pgm(heatmap: &Heatmap, path: &Path) -> Result<PathBuf> {
    let values: Vec<f64> = heatmap.counts.iter().map(|&c| c as f64).collect();
    write_pgm(path, heatmap.grid, heatmap.grid, &scale_to_u8(&values))?;
    let csv_path = path.with_extension("csv");
    std::fs::write(&csv_path, heatmap_csv(heatmap)).map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}

pub fn heatmap_csv(heatmap: &Heatmap) -> String {
    let mut out = String::new();
    for row in heatmap.counts.chunks(heatmap.grid) {
        let line: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Reads a square count grid written by [`heatmap_csv`].
pub fn read_heatmap_csv(text: &str) -> Result<(usize, Vec<u64>)> {
    let rows: Vec<Vec<u64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::format("heatmap CSV", format!("bad count {v:?}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let g = rows.len();
    if g == 0 || rows.iter().any(|r| r.len() != g) {
        return Err(Error::format("heatmap CSV", "grid is not square"));
    }
    Ok((g, rows.concat()))
}
