use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Boundary condition used to extend an activation before convolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PaddingMode {
    /// Out-of-image support reads 0.
    Zero,
    /// Out-of-image support wraps to the opposite edge.
    Circular,
    /// Mirror about the edge pixel (the edge pixel itself is not repeated).
    Reflect,
    /// Out-of-image support is drawn iid uniform in `[0, amplitude]`.
    Random { amplitude: f64 },
}

impl Default for PaddingMode {
    fn default() -> Self {
        PaddingMode::Zero
    }
}

impl PaddingMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PaddingMode::Random { amplitude } if !(amplitude >= 0.0 && amplitude.is_finite()) => {
                Err(Error::invalid(format!(
                    "random padding amplitude must be finite and >= 0, got {amplitude}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Source coordinate of padded coordinate `p` along an axis of length
    /// `len`, or `None` when the cell is filled by a constant / random value.
    #[inline]
    fn source(&self, p: usize, amount: usize, len: usize) -> Option<usize> {
        let i = p as isize - amount as isize;
        let n = len as isize;
        match self {
            PaddingMode::Zero | PaddingMode::Random { .. } => {
                (0..n).contains(&i).then_some(i as usize)
            }
            PaddingMode::Circular => Some(i.rem_euclid(n) as usize),
            PaddingMode::Reflect => {
                let r = if i < 0 {
                    -i
                } else if i >= n {
                    2 * (n - 1) - i
                } else {
                    i
                };
                Some(r as usize)
            }
        }
    }

    fn check_amount(&self, amount: usize, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if matches!(self, PaddingMode::Reflect) && amount > 0 && amount >= h.min(w) {
            return Err(Error::shape(format!(
                "reflect padding of {amount} needs spatial dims > {amount}, got {h}x{w}"
            )));
        }
        if matches!(self, PaddingMode::Circular) && amount > 0 && (h == 0 || w == 0) {
            return Err(Error::shape("circular padding of an empty plane"));
        }
        Ok(())
    }
}

/// Pads every plane by `amount` pixels per side.
///
/// Random fills are drawn from `rng` in row-major order of the padded
/// border cells, plane by plane.
pub fn pad<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    amount: usize,
    mode: PaddingMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let s = input.shape();
    mode.check_amount(amount, s.h, s.w)?;
    if amount == 0 {
        return Ok(input.clone());
    }
    let (ph, pw) = (s.h + 2 * amount, s.w + 2 * amount);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ph, pw));
    let x_src: Vec<Option<usize>> = (0..pw).map(|px| mode.source(px, amount, s.w)).collect();
    let amplitude = match mode {
        PaddingMode::Random { amplitude } => amplitude,
        _ => 0.0,
    };
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for py in 0..ph {
                let row = &mut dst[py * pw..(py + 1) * pw];
                match mode.source(py, amount, s.h) {
                    Some(y) => {
                        let src_row = &src[y * s.w..(y + 1) * s.w];
                        row[amount..amount + s.w].copy_from_slice(src_row);
                        for px in (0..amount).chain(amount + s.w..pw) {
                            row[px] = match x_src[px] {
                                Some(x) => src_row[x],
                                None => fill(&mode, amplitude, rng),
                            };
                        }
                    }
                    None => {
                        for v in row.iter_mut() {
                            *v = fill(&mode, amplitude, rng);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn fill<T: Scalar, R: Rng + ?Sized>(mode: &PaddingMode, amplitude: f64, rng: &mut R) -> T {
    match mode {
        PaddingMode::Random { .. } => T::of(rng.gen::<f64>() * amplitude),
        _ => T::zero(),
    }
}

/// Adjoint of [`pad`]: folds the gradient of the padded tensor back onto
/// the `input_shape` tensor. Zero and random fills are constants with
/// respect to the input, so their cells are simply cropped.
pub fn pad_backward<T: Scalar>(
    grad_padded: &Tensor<T>,
    amount: usize,
    mode: PaddingMode,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    let s = input_shape;
    let g = grad_padded.shape();
    if g != Shape::new(s.n, s.c, s.h + 2 * amount, s.w + 2 * amount) {
        return Err(Error::shape(format!(
            "padded gradient {g} does not match input {s} with pad {amount}"
        )));
    }
    mode.check_amount(amount, s.h, s.w)?;
    if amount == 0 {
        return Ok(grad_padded.clone());
    }
    let (ph, pw) = (g.h, g.w);
    let x_src: Vec<Option<usize>> = (0..pw).map(|px| mode.source(px, amount, s.w)).collect();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad_padded.plane(n, c);
            let dst = out.plane_mut(n, c);
            for py in 0..ph {
                let Some(y) = mode.source(py, amount, s.h) else {
                    continue;
                };
                let row = &src[py * pw..(py + 1) * pw];
                let dst_row = &mut dst[y * s.w..(y + 1) * s.w];
                for (d, &v) in dst_row.iter_mut().zip(&row[amount..amount + s.w]) {
                    *d += v;
                }
                for px in (0..amount).chain(amount + s.w..pw) {
                    if let Some(x) = x_src[px] {
                        dst_row[x] += row[px];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn row(values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(1, 1, 1, values.len()), values).unwrap()
    }

    /// Pads only along x by embedding the row in a 3-row plane and reading
    /// the middle padded row back.
    fn pad_row(values: &[f64], mode: PaddingMode) -> Vec<f64> {
        let w = values.len();
        let mut plane = Vec::new();
        for _ in 0..3 {
            plane.extend_from_slice(values);
        }
        let t = Tensor::<f64>::from_f64(Shape::new(1, 1, 3, w), &plane).unwrap();
        let p = pad(&t, 1, mode, &mut stream(0)).unwrap();
        p.plane(0, 0)[2 * (w + 2)..3 * (w + 2)].to_vec()
    }

    #[test]
    fn pad_row_examples() {
        assert_eq!(pad_row(&[1., 2., 3.], PaddingMode::Zero), [0., 1., 2., 3., 0.]);
        assert_eq!(pad_row(&[1., 2., 3.], PaddingMode::Circular), [3., 1., 2., 3., 1.]);
        assert_eq!(pad_row(&[1., 2., 3.], PaddingMode::Reflect), [2., 1., 2., 3., 2.]);
    }

    #[test]
    fn reflect_matches_mirror_index_oracle() {
        // Mirror-index oracle: reflect about 0 and len-1 until in range.
        fn mirror(mut i: isize, len: isize) -> usize {
            loop {
                if i < 0 {
                    i = -i;
                } else if i >= len {
                    i = 2 * (len - 1) - i;
                } else {
                    return i as usize;
                }
            }
        }
        let vals: Vec<f64> = (0..5).map(|v| v as f64 * 1.5 + 1.0).collect();
        let t = Tensor::<f64>::from_f64(Shape::new(1, 1, 5, 5), &{
            let mut v = Vec::new();
            for y in 0..5 {
                v.extend(vals.iter().map(|x| x * 10.0 + y as f64));
            }
            v
        })
        .unwrap();
        let p = pad(&t, 3, PaddingMode::Reflect, &mut stream(0)).unwrap();
        for py in 0..11 {
            for px in 0..11 {
                let y = mirror(py as isize - 3, 5);
                let x = mirror(px as isize - 3, 5);
                assert_eq!(p.at(0, 0, py, px), t.at(0, 0, y, x));
            }
        }
    }

    #[test]
    fn reflect_rejects_large_amount() {
        let t = row(&[1., 2., 3.]);
        assert!(matches!(
            pad(&t, 1, PaddingMode::Reflect, &mut stream(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn random_fill_is_bounded_and_seeded() {
        let t = Tensor::<f64>::filled(Shape::new(2, 2, 3, 4), 9.0);
        let mode = PaddingMode::Random { amplitude: 0.5 };
        let a = pad(&t, 2, mode, &mut stream(11)).unwrap();
        let b = pad(&t, 2, mode, &mut stream(11)).unwrap();
        assert_eq!(a, b);
        for n in 0..2 {
            for c in 0..2 {
                for y in 0..7 {
                    for x in 0..8 {
                        let v = a.at(n, c, y, x);
                        let interior = (2..5).contains(&y) && (2..6).contains(&x);
                        if interior {
                            assert_eq!(v, 9.0);
                        } else {
                            assert!((0.0..=0.5).contains(&v));
                        }
                    }
                }
            }
        }
        assert!(PaddingMode::Random { amplitude: -1.0 }.validate().is_err());
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <pad(x), g> == <x, pad_backward(g)> for the linear modes.
        let mut rng = stream(5);
        let x: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| rng.gen::<f64>() - 0.5).collect();
        let x = Tensor::<f64>::from_f64(Shape::new(2, 3, 4, 5), &x).unwrap();
        for mode in [PaddingMode::Zero, PaddingMode::Circular, PaddingMode::Reflect] {
            for amount in [1, 2, 3] {
                let p = pad(&x, amount, mode, &mut stream(0)).unwrap();
                let g: Vec<f64> = (0..p.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
                let g = Tensor::from_f64(p.shape(), &g).unwrap();
                let lhs: f64 = p.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let back = pad_backward(&g, amount, mode, x.shape()).unwrap();
                let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-12, "{mode:?} {amount}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn random_backward_crops() {
        let g = Tensor::<f64>::filled(Shape::new(1, 1, 4, 4), 1.0);
        let back =
            pad_backward(&g, 1, PaddingMode::Random { amplitude: 1.0 }, Shape::new(1, 1, 2, 2))
                .unwrap();
        assert_eq!(back.data(), &[1.0; 4]);
    }
}
