//! Placement-controlled composite samples: a binarized digit glyph pasted
//! over a background at a policy-constrained offset, with a per-pixel label
//! map.

mod background;
mod glyphs;
mod idx;
mod placement;

use std::ops::Range;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use background::{box_blur, crop_window, BackgroundSource, BackgroundSpec, BACKGROUND_MAX};
pub use glyphs::{render_digit, GLYPH_SIZE};
pub use idx::{encode_idx, parse_idx, IdxData};
pub use placement::{max_offsets, normalized_offset, sample_placement, PlacementPolicy, MAX_REJECTIONS};

use crate::augment::ShiftSpec;
use crate::rng::{splitmix64, stream};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Glyph pixels above this become object pixels.
pub const MASK_THRESHOLD: f32 = 0.5;

/// Axis-aligned box in pixels. After a periodic shift `x + w` may exceed the
/// image width; [`BBox::pieces`] gives the visible rectangles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    /// Splits a box on the `width x height` torus at the wrap seams.
    pub fn pieces(&self, width: usize, height: usize) -> Vec<BBox> {
        let split = |start: usize, len: usize, size: usize| {
            if start + len <= size {
                vec![(start, len)]
            } else {
                vec![(start, size - start), (0, start + len - size)]
            }
        };
        let mut out = Vec::new();
        for &(y, h) in &split(self.y, self.h, height) {
            for &(x, w) in &split(self.x, self.w, width) {
                out.push(BBox { x, y, w, h });
            }
        }
        out
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub digit_class: u8,
    /// Glyph offset from the centered position, in pixels.
    pub offset: (i64, i64),
    pub r: f64,
    /// Tight bounds of the object mask; `None` for an empty mask.
    pub bbox: Option<BBox>,
    /// Accumulated periodic shift applied after generation.
    pub shift: ShiftSpec,
    pub glyph_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Shape `(1, 1, H, W)`, values in `[0, 1]`.
    pub input: Tensor<f32>,
    /// Class index per pixel: 0 background, `digit + 1` on the object.
    pub target: Vec<u8>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.input.shape().h
    }

    pub fn width(&self) -> usize {
        self.input.shape().w
    }

    /// Canonical byte encoding, used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.input.data().len() * 5 + 64);
        for v in self.input.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.target);
        out.extend_from_slice(
            serde_json::to_string(&self.meta)
                .expect("sample metadata serializes")
                .as_bytes(),
        );
        out
    }
}

/// Stacks samples into an `(n, 1, H, W)` batch and a flat target map.
pub fn stack_batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut target = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {h}x{w} and {}x{} samples",
                s.height(),
                s.width()
            )));
        }
        data.extend(s.input.data().iter().map(|&v| T::of(v as f64)));
        target.extend_from_slice(&s.target);
    }
    Ok((Tensor::from_vec(Shape::new(samples.len(), 1, h, w), data)?, target))
}

/// Square glyphs with digit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSet {
    size: usize,
    images: Vec<Vec<f32>>,
    labels: Vec<u8>,
    by_class: Vec<Vec<usize>>,
}

impl GlyphSet {
    pub fn new(size: usize, images: Vec<Vec<f32>>, labels: Vec<u8>) -> Result<GlyphSet> {
        if size == 0 {
            return Err(Error::invalid("glyph size must be positive"));
        }
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} glyphs but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(Error::invalid("glyph set is empty"));
        }
        for (i, img) in images.iter().enumerate() {
            if img.len() != size * size {
                return Err(Error::shape(format!("glyph {i} has {} pixels, expected {}", img.len(), size * size)));
            }
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("glyph {i} has pixels outside [0, 1]")));
            }
        }
        let mut by_class = vec![Vec::new(); 10];
        for (i, &l) in labels.iter().enumerate() {
            by_class
                .get_mut(l as usize)
                .ok_or_else(|| Error::invalid(format!("digit label {l} out of range")))?
                .push(i);
        }
        Ok(GlyphSet {
            size,
            images,
            labels,
            by_class,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    /// Digit classes with at least one glyph.
    pub fn classes(&self) -> Vec<u8> {
        (0..10u8).filter(|&c| !self.by_class[c as usize].is_empty()).collect()
    }

    pub fn of_class(&self, class: u8) -> &[usize] {
        &self.by_class[class as usize]
    }
}

/// Pastes `glyph` (`g x g`, `g = sqrt(len)`) over `background` (`H x W`) at
/// `offset` from the centered position.
pub fn composite_sample(
    glyph: &[f32],
    digit_class: u8,
    background: &[f32],
    height: usize,
    width: usize,
    offset: (i64, i64),
) -> Result<Sample> {
    let g = (glyph.len() as f64).sqrt() as usize;
    if g * g != glyph.len() || g == 0 {
        return Err(Error::shape(format!("glyph with {} pixels is not square", glyph.len())));
    }
    if background.len() != height * width {
        return Err(Error::shape(format!(
            "background has {} pixels, expected {height}x{width}",
            background.len()
        )));
    }
    if digit_class > 9 {
        return Err(Error::invalid(format!("digit class {digit_class} out of range")));
    }
    let r = normalized_offset(offset.0, offset.1, (height, width), (g, g))?;
    let x0 = ((width - g) / 2) as i64 + offset.0;
    let y0 = ((height - g) / 2) as i64 + offset.1;
    let (x0, y0) = (x0 as usize, y0 as usize);

    let mut input = background.to_vec();
    let mut target = vec![0u8; height * width];
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for gy in 0..g {
        for gx in 0..g {
            if glyph[gy * g + gx] > MASK_THRESHOLD {
                let (y, x) = (y0 + gy, x0 + gx);
                input[y * width + x] = 1.0;
                target[y * width + x] = digit_class + 1;
                bounds = Some(match bounds {
                    None => (y, x, y, x),
                    Some((a, b, c, d)) => (a.min(y), b.min(x), c.max(y), d.max(x)),
                });
            }
        }
    }
    let bbox = bounds.map(|(y_min, x_min, y_max, x_max)| BBox {
        x: x_min,
        y: y_min,
        w: x_max - x_min + 1,
        h: y_max - y_min + 1,
    });
    Ok(Sample {
        input: Tensor::from_vec(Shape::new(1, 1, height, width), input)?,
        target,
        meta: SampleMeta {
            digit_class,
            offset,
            r,
            bbox,
            shift: ShiftSpec::default(),
            glyph_index: None,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GlyphSource {
    /// MNIST-style IDX image and label files.
    Idx { images: PathBuf, labels: PathBuf },
    /// Jittered stroke digits, `per_class` of each.
    Procedural { per_class: usize, seed: u64 },
}

impl Default for GlyphSource {
    fn default() -> Self {
        GlyphSource::Procedural { per_class: 200, seed: 0 }
    }
}

impl GlyphSource {
    pub fn load(&self) -> Result<GlyphSet> {
        match self {
            GlyphSource::Idx { images, labels } => GlyphSet::from_idx_files(images, labels),
            GlyphSource::Procedural { per_class, seed } => {
                if *per_class == 0 {
                    return Err(Error::config("procedural glyph source needs per_class >= 1"));
                }
                GlyphSet::procedural(*per_class, *seed)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub policy: PlacementPolicy,
    pub background: BackgroundSpec,
    pub count: usize,
    pub master_seed: u64,
    pub glyph_source: GlyphSource,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            height: 64,
            width: 96,
            policy: PlacementPolicy::Unrestricted,
            background: BackgroundSpec::default(),
            count: 6000,
            master_seed: 0,
            glyph_source: GlyphSource::default(),
        }
    }
}

impl DatasetConfig {
    /// Checks that do not need the glyphs loaded.
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("dataset count must be at least 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("dataset height and width must be positive"));
        }
        self.policy.validate()
    }
}

/// Deterministic sample stream: sample `i` depends only on the config and
/// `i`.
#[derive(Clone, Debug)]
pub struct Dataset {
    config: DatasetConfig,
    glyphs: Arc<GlyphSet>,
    background: Arc<BackgroundSource>,
}

impl Dataset {
    pub fn new(config: DatasetConfig) -> Result<Dataset> {
        config.validate()?;
        let glyphs = Arc::new(config.glyph_source.load()?);
        let background = Arc::new(BackgroundSource::load(&config.background)?);
        Dataset::from_parts(config, glyphs, background)
    }

    pub fn from_parts(config: DatasetConfig, glyphs: Arc<GlyphSet>, background: Arc<BackgroundSource>) -> Result<Dataset> {
        config.validate()?;
        let g = glyphs.size();
        if config.height < g || config.width < g {
            return Err(Error::config(format!(
                "image {}x{} smaller than the {g}x{g} glyphs",
                config.height, config.width
            )));
        }
        Ok(Dataset {
            config,
            glyphs,
            background,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn glyphs(&self) -> &GlyphSet {
        &self.glyphs
    }

    pub fn len(&self) -> usize {
        self.config.count
    }

    pub fn is_empty(&self) -> bool {
        self.config.count == 0
    }

    /// Same glyphs and backgrounds under a different policy, seed and count.
    pub fn derive(&self, policy: PlacementPolicy, master_seed: u64, count: usize) -> Result<Dataset> {
        let config = DatasetConfig {
            policy,
            master_seed,
            count,
            ..self.config.clone()
        };
        Dataset::from_parts(config, self.glyphs.clone(), self.background.clone())
    }

    pub fn with_policy(&self, policy: PlacementPolicy) -> Result<Dataset> {
        self.derive(policy, self.config.master_seed, self.config.count)
    }

    /// Sample `i`, drawn from the stream seeded by `splitmix64(master_seed, i)`.
    /// Indices past `count` are valid and continue the stream.
    pub fn sample(&self, i: usize) -> Result<Sample> {
        let c = &self.config;
        let mut rng = stream(splitmix64(c.master_seed, i as u64));
        let classes = self.glyphs.classes();
        let class = classes[rng.gen_range(0..classes.len())];
        let members = self.glyphs.of_class(class);
        let glyph_index = members[rng.gen_range(0..members.len())];
        let g = self.glyphs.size();
        let offset = sample_placement(&c.policy, (c.height, c.width), (g, g), &mut rng)?;
        let background = self.background.generate(c.height, c.width, &mut rng);
        let mut sample = composite_sample(
            self.glyphs.image(glyph_index),
            class,
            &background,
            c.height,
            c.width,
            offset,
        )?;
        sample.meta.glyph_index = Some(glyph_index);
        Ok(sample)
    }

    /// Samples for `range`, generated in parallel, returned in index order.
    pub fn samples(&self, range: Range<usize>) -> Result<Vec<Sample>> {
        range.into_par_iter().map(|i| self.sample(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.config.count).map(move |i| self.sample(i))
    }
}

pub fn make_dataset(config: DatasetConfig) -> Result<Dataset> {
    Dataset::new(config)
}
