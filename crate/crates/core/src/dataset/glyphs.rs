//! Procedural handwritten-style digits, used when no IDX glyph files are
//! available. Each digit is a set of stroke polylines on a 20x20 box that is
//! jittered (scale, shear, rotation, offset, stroke width) and rasterised
//! into the centre of a 28x28 glyph, like MNIST.

use rand::Rng;

use super::GlyphSet;
use crate::rng::child_stream;
use crate::Result;

pub const GLYPH_SIZE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let steps = 24;
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn strokes(digit: u8) -> Vec<Stroke> {
    use std::f64::consts::PI;
    let line = |pts: &[(f64, f64)]| pts.to_vec();
    match digit {
        0 => vec![ellipse(10.0, 10.0, 6.0, 9.0, 0.0, 2.0 * PI)],
        1 => vec![line(&[(6.5, 4.5), (10.5, 1.0), (10.5, 19.0)])],
        2 => vec![line(&[
            (4.0, 5.5),
            (5.5, 2.5),
            (8.5, 1.0),
            (12.0, 1.0),
            (15.0, 3.0),
            (15.5, 6.5),
            (13.5, 10.0),
            (4.0, 19.0),
            (16.5, 19.0),
        ])],
        3 => vec![
            line(&[
                (4.0, 3.0),
                (8.0, 1.0),
                (12.5, 1.0),
                (15.5, 3.5),
                (15.0, 7.5),
                (10.0, 9.5),
                (15.0, 11.5),
                (16.0, 15.5),
                (13.0, 18.8),
                (8.0, 19.0),
                (4.0, 17.0),
            ]),
            line(&[(10.0, 9.5), (7.0, 9.5)]),
        ],
        4 => vec![line(&[(13.0, 19.0), (13.0, 1.0), (3.0, 13.0), (17.0, 13.0)])],
        5 => vec![line(&[
            (15.5, 1.0),
            (5.5, 1.0),
            (4.5, 9.0),
            (9.0, 7.0),
            (13.5, 8.5),
            (16.0, 12.5),
            (14.5, 17.5),
            (9.5, 19.0),
            (4.0, 17.0),
        ])],
        6 => vec![line(&[
            (14.5, 2.0),
            (9.5, 1.0),
            (5.5, 4.5),
            (4.0, 11.0),
            (5.5, 17.0),
            (10.0, 19.0),
            (14.0, 17.5),
            (15.5, 13.5),
            (13.0, 10.0),
            (8.5, 9.5),
            (5.0, 12.5),
        ])],
        7 => vec![
            line(&[(3.5, 1.0), (16.5, 1.0), (8.5, 19.0)]),
            line(&[(8.0, 10.0), (14.0, 10.0)]),
        ],
        8 => vec![
            ellipse(10.0, 5.3, 4.5, 4.3, 0.0, 2.0 * PI),
            ellipse(10.0, 14.4, 5.5, 4.8, 0.0, 2.0 * PI),
        ],
        9 => vec![
            ellipse(9.5, 6.0, 5.0, 5.0, 0.0, 2.0 * PI),
            line(&[(14.5, 6.0), (14.0, 12.0), (12.5, 19.0)]),
        ],
        _ => unreachable!("digits are 0-9"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one jittered digit into a `GLYPH_SIZE x GLYPH_SIZE` image with
/// values in `[0, 1]`.
pub fn render_digit<R: Rng + ?Sized>(digit: u8, rng: &mut R) -> Vec<f32> {
    let scale = rng.gen_range(0.85..1.1);
    let shear = rng.gen_range(-0.25..0.25);
    let angle: f64 = rng.gen_range(-0.15..0.15);
    let (tx, ty) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    let half_width = rng.gen_range(0.8..1.4);
    let (sin, cos) = angle.sin_cos();
    let c = GLYPH_SIZE as f64 / 2.0;
    let transform = |(x, y): (f64, f64)| {
        let (x, y) = ((x - 10.0) * scale, (y - 10.0) * scale);
        let x = x + shear * y;
        (cos * x - sin * y + c + tx, sin * x + cos * y + c + ty)
    };
    let segments: Vec<((f64, f64), (f64, f64))> = strokes(digit)
        .into_iter()
        .flat_map(|s| {
            let pts: Vec<_> = s.into_iter().map(transform).collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let mut img = vec![0.0f32; GLYPH_SIZE * GLYPH_SIZE];
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            img[y * GLYPH_SIZE + x] = (1.0 - (d - half_width)).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

impl GlyphSet {
    /// `per_class` jittered renderings of each digit, deterministic in
    /// `seed`. Glyphs are ordered class-major.
    pub fn procedural(per_class: usize, seed: u64) -> Result<GlyphSet> {
        let mut images = Vec::with_capacity(per_class * 10);
        let mut labels = Vec::with_capacity(per_class * 10);
        for digit in 0..10u8 {
            for k in 0..per_class {
                let mut rng = child_stream(seed, (digit as u64) << 32 | k as u64);
                images.push(render_digit(digit, &mut rng));
                labels.push(digit);
            }
        }
        GlyphSet::new(GLYPH_SIZE, images, labels)
    }
}
