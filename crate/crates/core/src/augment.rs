//! Shift-based mitigations: periodic shifts, shifting an object onto the
//! image boundary, and edge block drop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Sample};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Periodic translation; positive `dx` moves content right, positive `dy`
/// moves it down.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub dx: i64,
    pub dy: i64,
}

impl ShiftSpec {
    pub fn new(dx: i64, dy: i64) -> Self {
        ShiftSpec { dx, dy }
    }

    pub fn inverse(self) -> Self {
        ShiftSpec::new(-self.dx, -self.dy)
    }

    pub fn compose(self, other: ShiftSpec) -> Self {
        ShiftSpec::new(self.dx + other.dx, self.dy + other.dy)
    }
}

/// Shifts a row-major `h x w` plane: pixel `(i, j)` moves to
/// `((i + dy) mod h, (j + dx) mod w)`.
pub fn periodic_shift<T: Copy>(plane: &[T], h: usize, w: usize, spec: ShiftSpec) -> Vec<T> {
    assert_eq!(plane.len(), h * w, "plane length does not match {h}x{w}");
    if plane.is_empty() {
        return Vec::new();
    }
    let sy = spec.dy.rem_euclid(h as i64) as usize;
    let sx = spec.dx.rem_euclid(w as i64) as usize;
    let mut out = plane.to_vec();
    for i in 0..h {
        let ti = (i + sy) % h;
        let src = &plane[i * w..(i + 1) * w];
        let dst = &mut out[ti * w..(ti + 1) * w];
        dst[sx..].copy_from_slice(&src[..w - sx]);
        dst[..sx].copy_from_slice(&src[w - sx..]);
    }
    out
}

/// Shifts every plane of a tensor.
pub fn periodic_shift_tensor<T: Scalar>(t: &Tensor<T>, spec: ShiftSpec) -> Tensor<T> {
    t.roll(spec.dy as isize, spec.dx as isize)
}

/// Moves a box on the `w x h` torus. The result keeps `x < w`, `y < h`;
/// use [`BBox::pieces`] for the visible rectangles.
pub fn shift_box(b: &BBox, w: usize, h: usize, spec: ShiftSpec) -> BBox {
    BBox {
        x: (b.x as i64 + spec.dx).rem_euclid(w as i64) as usize,
        y: (b.y as i64 + spec.dy).rem_euclid(h as i64) as usize,
        w: b.w,
        h: b.h,
    }
}

/// Applies a periodic shift to the input, the label map and the box.
pub fn periodic_shift_sample(sample: &Sample, spec: ShiftSpec) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let input = periodic_shift_tensor(&sample.input, spec);
    let target = periodic_shift(&sample.target, h, w, spec);
    let mut meta = sample.meta.clone();
    meta.bbox = meta.bbox.map(|b| shift_box(&b, w, h, spec));
    meta.shift = meta.shift.compose(spec);
    Sample {
        input,
        target,
        meta,
    }
}

/// Largest shift magnitude allowed by `max_frac` along an axis of `len`.
pub fn max_shift(max_frac: f64, len: usize) -> i64 {
    (max_frac * len as f64).floor() as i64
}

/// Draws a shift uniformly from `[-floor(max_frac*W), floor(max_frac*W)]`
/// (and likewise for `H`).
pub fn draw_random_shift<R: Rng + ?Sized>(h: usize, w: usize, max_frac: f64, rng: &mut R) -> Result<ShiftSpec> {
    if !(0.0..=1.0).contains(&max_frac) {
        return Err(Error::invalid(format!("max_frac must be in [0, 1], got {max_frac}")));
    }
    let mx = max_shift(max_frac, w);
    let my = max_shift(max_frac, h);
    Ok(ShiftSpec::new(rng.gen_range(-mx..=mx), rng.gen_range(-my..=my)))
}

pub fn random_periodic_shift<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, max_frac: f64) -> Result<Sample> {
    let spec = draw_random_shift(sample.height(), sample.width(), max_frac, rng)?;
    Ok(periodic_shift_sample(sample, spec))
}

/// Side of the image a box edge is moved onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];
}

/// The shift that puts the closest edge of `b` exactly on the image
/// boundary. Ties resolve left, right, top, bottom.
pub fn boundary_shift(b: &BBox, w: usize, h: usize) -> Result<(Side, ShiftSpec)> {
    if b.w == 0 || b.h == 0 || b.x + b.w > w || b.y + b.h > h {
        return Err(Error::invalid(format!("box {b:?} is not inside a {w}x{h} image")));
    }
    let dists = [b.x, w - (b.x + b.w), b.y, h - (b.y + b.h)];
    let (k, &d) = dists
        .iter()
        .enumerate()
        .min_by_key(|&(i, d)| (*d, i))
        .expect("four distances");
    let d = d as i64;
    let side = Side::ALL[k];
    let spec = match side {
        Side::Left => ShiftSpec::new(-d, 0),
        Side::Right => ShiftSpec::new(d, 0),
        Side::Top => ShiftSpec::new(0, -d),
        Side::Bottom => ShiftSpec::new(0, d),
    };
    Ok((side, spec))
}

/// Result of [`shift_object_to_boundary`].
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryShift<T> {
    pub image: Vec<T>,
    pub labels: Vec<u8>,
    pub boxes: Vec<BBox>,
    pub chosen: usize,
    pub side: Side,
    pub shift: ShiftSpec,
}

/// Picks one box uniformly and periodically shifts the image, labels and
/// all boxes so that the chosen box touches its closest boundary.
pub fn shift_object_to_boundary<T: Copy, R: Rng + ?Sized>(
    image: &[T],
    h: usize,
    w: usize,
    boxes: &[BBox],
    labels: &[u8],
    rng: &mut R,
) -> Result<BoundaryShift<T>> {
    if boxes.is_empty() {
        return Err(Error::invalid("shift_object_to_boundary needs at least one box"));
    }
    if image.len() != h * w || labels.len() != h * w {
        return Err(Error::shape(format!(
            "image ({}) / labels ({}) do not match {h}x{w}",
            image.len(),
            labels.len()
        )));
    }
    let chosen = rng.gen_range(0..boxes.len());
    let (side, shift) = boundary_shift(&boxes[chosen], w, h)?;
    Ok(BoundaryShift {
        image: periodic_shift(image, h, w, shift),
        labels: periodic_shift(labels, h, w, shift),
        boxes: boxes.iter().map(|b| shift_box(b, w, h, shift)).collect(),
        chosen,
        side,
        shift,
    })
}

/// Sample-level wrapper around [`shift_object_to_boundary`] using the
/// sample's object box.
pub fn shift_sample_to_boundary<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    let b = sample
        .meta
        .bbox
        .ok_or_else(|| Error::invalid("sample has no object box"))?;
    let (h, w) = (sample.height(), sample.width());
    let shifted = shift_object_to_boundary(sample.input.data(), h, w, &[b], &sample.target, rng)?;
    Ok(periodic_shift_sample(sample, shifted.shift))
}

/// Width of the dropped band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandWidth {
    Pixels(usize),
    /// Fraction of the activation dimension across the band, at least 1px.
    Fraction(f64),
}

/// Edge block drop: zero a full band on one side of the activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDropSpec {
    /// Chance that one application fires, per batch item.
    pub probability: f64,
    /// Fixed side; `None` draws one uniformly per firing.
    #[serde(default)]
    pub side: Option<Side>,
    #[serde(default = "default_band")]
    pub band: BandWidth,
}

fn default_band() -> BandWidth {
    BandWidth::Fraction(0.125)
}

impl Default for EdgeDropSpec {
    fn default() -> Self {
        EdgeDropSpec {
            probability: 0.5,
            side: None,
            band: default_band(),
        }
    }
}

impl EdgeDropSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid(format!(
                "edge drop probability must be in [0, 1], got {}",
                self.probability
            )));
        }
        if let BandWidth::Fraction(f) = self.band {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid(format!("band fraction must be in (0, 1), got {f}")));
            }
        }
        Ok(())
    }

    /// Band width in pixels across an axis of length `dim`.
    pub fn band_pixels(&self, dim: usize) -> Result<usize> {
        let b = match self.band {
            BandWidth::Pixels(p) => p,
            BandWidth::Fraction(f) => ((f * dim as f64).floor() as usize).max(1),
        };
        if b == 0 || b >= dim {
            return Err(Error::shape(format!(
                "band width {b} invalid for an activation dimension of {dim}"
            )));
        }
        Ok(b)
    }
}

/// Which band (if any) was dropped for each batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    shape: Shape,
    items: Vec<Option<(Side, usize)>>,
}

impl DropMask {
    pub fn dropped(&self, n: usize) -> Option<(Side, usize)> {
        self.items[n]
    }

    /// Multiplier applied to cell `(y, x)` of item `n`.
    fn factor(&self, n: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape.h, self.shape.w);
        let Some((side, band)) = self.items[n] else {
            return 1.0;
        };
        let inside = match side {
            Side::Left => x < band,
            Side::Right => x >= w - band,
            Side::Top => y < band,
            Side::Bottom => y >= h - band,
        };
        if inside {
            return 0.0;
        }
        let across = match side {
            Side::Left | Side::Right => h,
            Side::Top | Side::Bottom => w,
        };
        let total = (h * w) as f64;
        total / (total - (band * across) as f64)
    }

    fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        if t.shape() != self.shape {
            return Err(Error::shape(format!(
                "edge drop mask for {} applied to {}",
                self.shape,
                t.shape()
            )));
        }
        let s = self.shape;
        let mut out = t.clone();
        for n in 0..s.n {
            if self.items[n].is_none() {
                continue;
            }
            let factors: Vec<T> = (0..s.plane())
                .map(|p| T::of(self.factor(n, p / s.w, p % s.w)))
                .collect();
            for c in 0..s.c {
                for (v, &f) in out.plane_mut(n, c).iter_mut().zip(&factors) {
                    *v *= f;
                }
            }
        }
        Ok(out)
    }
}

/// With probability `spec.probability` per batch item (training only), zero
/// a band of the chosen side in every channel and rescale the surviving
/// cells by `total / kept` so the expected activation mass is preserved.
pub fn edge_block_drop<T: Scalar, R: Rng + ?Sized>(
    activation: &Tensor<T>,
    spec: &EdgeDropSpec,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor<T>, DropMask)> {
    spec.validate()?;
    let s = activation.shape();
    let mut items = vec![None; s.n];
    if training {
        for item in items.iter_mut() {
            if !(rng.gen::<f64>() < spec.probability) {
                continue;
            }
            let side = match spec.side {
                Some(side) => side,
                None => Side::ALL[rng.gen_range(0..4)],
            };
            let dim = match side {
                Side::Left | Side::Right => s.w,
                Side::Top | Side::Bottom => s.h,
            };
            *item = Some((side, spec.band_pixels(dim)?));
        }
    }
    let mask = DropMask { shape: s, items };
    let out = mask.apply(activation)?;
    Ok((out, mask))
}

/// The drop is linear in the activation, so the backward pass applies the
/// same mask.
pub fn edge_block_drop_backward<T: Scalar>(mask: &DropMask, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    mask.apply(upstream)
}

/// Transforms an experiment can list by name.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    RandomPeriodicShift {
        #[serde(default = "default_max_frac")]
        max_frac: f64,
    },
    ShiftObjectToBoundary,
    /// Applied inside the network during training, not to the sample.
    EdgeBlockDrop(EdgeDropSpec),
}

fn default_max_frac() -> f64 {
    0.25
}

impl Augmentation {
    /// Applies a sample-level transform; network-level ones return the
    /// sample unchanged.
    pub fn apply<R: Rng + ?Sized>(&self, sample: &Sample, rng: &mut R) -> Result<Sample> {
        match self {
            Augmentation::RandomPeriodicShift { max_frac } => random_periodic_shift(sample, rng, *max_frac),
            Augmentation::ShiftObjectToBoundary => shift_sample_to_boundary(sample, rng),
            Augmentation::EdgeBlockDrop(_) => Ok(sample.clone()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::RandomPeriodicShift { .. } => "random_periodic_shift",
            Augmentation::ShiftObjectToBoundary => "shift_object_to_boundary",
            Augmentation::EdgeBlockDrop(_) => "edge_block_drop",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn row_shift_by_one() {
        assert_eq!(periodic_shift(&[1, 2, 3, 4], 1, 4, ShiftSpec::new(1, 0)), [4, 1, 2, 3]);
        assert_eq!(periodic_shift(&[1, 2, 3, 4], 1, 4, ShiftSpec::new(-1, 0)), [2, 3, 4, 1]);
    }

    #[test]
    fn full_period_is_identity() {
        let img: Vec<u8> = (0..12).collect();
        assert_eq!(periodic_shift(&img, 3, 4, ShiftSpec::new(4, 3)), img);
        assert_eq!(periodic_shift(&img, 3, 4, ShiftSpec::new(-8, 6)), img);
    }

    #[test]
    fn straddling_box_splits() {
        let b = BBox { x: 2, y: 0, w: 2, h: 1 };
        let s = shift_box(&b, 4, 3, ShiftSpec::new(1, 0));
        assert_eq!(s, BBox { x: 3, y: 0, w: 2, h: 1 });
        assert_eq!(
            s.pieces(4, 3),
            vec![BBox { x: 3, y: 0, w: 1, h: 1 }, BBox { x: 0, y: 0, w: 1, h: 1 }]
        );
        assert_eq!(shift_box(&s, 4, 3, ShiftSpec::new(-1, 0)), b);
    }

    #[test]
    fn boundary_shift_examples() {
        let b = BBox { x: 100, y: 200, w: 80, h: 50 };
        let (side, spec) = boundary_shift(&b, 640, 480).unwrap();
        assert_eq!(side, Side::Left);
        assert_eq!(spec, ShiftSpec::new(-100, 0));
        assert_eq!(shift_box(&b, 640, 480, spec).x, 0);

        let touching = BBox { x: 0, y: 3, w: 2, h: 2 };
        assert_eq!(boundary_shift(&touching, 8, 8).unwrap().1, ShiftSpec::new(0, 0));

        let centered = BBox { x: 3, y: 3, w: 2, h: 2 };
        assert_eq!(boundary_shift(&centered, 8, 8).unwrap(), (Side::Left, ShiftSpec::new(-3, 0)));

        let bottom = BBox { x: 3, y: 5, w: 2, h: 2 };
        assert_eq!(boundary_shift(&bottom, 8, 8).unwrap(), (Side::Bottom, ShiftSpec::new(0, 1)));
    }

    #[test]
    fn empty_box_list_rejected() {
        let r = shift_object_to_boundary(&[0u8; 4], 2, 2, &[], &[0; 4], &mut stream(0));
        assert!(r.is_err());
    }

    #[test]
    fn edge_drop_closed_form() {
        let x = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2), 1.0);
        let spec = EdgeDropSpec {
            probability: 1.0,
            side: Some(Side::Left),
            band: BandWidth::Pixels(1),
        };
        let (y, mask) = edge_block_drop(&x, &spec, &mut stream(0), true).unwrap();
        assert_eq!(y.data(), &[0., 2., 0., 2.]);
        let g = edge_block_drop_backward(&mask, &Tensor::filled(x.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0., 2., 0., 2.]);
    }

    #[test]
    fn edge_drop_identity_cases() {
        let x = Tensor::<f64>::from_f64(Shape::new(2, 2, 4, 4), &(0..64).map(f64::from).collect::<Vec<_>>())
            .unwrap();
        let never = EdgeDropSpec {
            probability: 0.0,
            ..EdgeDropSpec::default()
        };
        assert_eq!(edge_block_drop(&x, &never, &mut stream(0), true).unwrap().0, x);
        let always = EdgeDropSpec {
            probability: 1.0,
            ..EdgeDropSpec::default()
        };
        assert_eq!(edge_block_drop(&x, &always, &mut stream(0), false).unwrap().0, x);
    }

    #[test]
    fn edge_drop_band_must_fit() {
        let x = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2), 1.0);
        let spec = EdgeDropSpec {
            probability: 1.0,
            side: Some(Side::Top),
            band: BandWidth::Pixels(2),
        };
        assert!(matches!(
            edge_block_drop(&x, &spec, &mut stream(0), true),
            Err(Error::Shape(_))
        ));
    }
}
