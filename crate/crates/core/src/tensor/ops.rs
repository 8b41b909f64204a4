use super::{Scalar, Shape, Tensor};
use crate::{Error, Result};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks `upstream` where `input <= 0` (the gradient at exactly 0 is 0).
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape(format!(
            "relu upstream {} does not match input {}",
            upstream.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let v = src[y * s.w + x];
                    let base = 2 * y * os.w + 2 * x;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + os.w] = v;
                    dst[base + os.w + 1] = v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2x`]: sums each 2x2 block.
pub fn upsample_nearest2x_backward<T: Scalar>(upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let s = upstream.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!(
            "upsample gradient must have even dims, got {}x{}",
            s.h, s.w
        )));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = upstream.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..os.h {
                for x in 0..os.w {
                    let base = 2 * y * s.w + 2 * x;
                    dst[y * os.w + x] = src[base] + src[base + 1] + src[base + s.w] + src[base + s.w + 1];
                }
            }
        }
    }
    Ok(out)
}

/// Channel concatenation `[a, b]` per batch item.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape(format!("cannot concatenate {sa} and {sb}")));
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(os.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::from_vec(os, data)
}

/// Inverse of [`concat_channels`]: splits off the first `c_first` channels.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = t.shape();
    if c_first > s.c {
        return Err(Error::shape(format!("cannot split {c_first} channels from {s}")));
    }
    let plane = s.plane();
    let mut a = Vec::with_capacity(s.n * c_first * plane);
    let mut b = Vec::with_capacity(s.n * (s.c - c_first) * plane);
    for n in 0..s.n {
        let item = t.item(n);
        a.extend_from_slice(&item[..c_first * plane]);
        b.extend_from_slice(&item[c_first * plane..]);
    }
    Ok((
        Tensor::from_vec(Shape::new(s.n, c_first, s.h, s.w), a)?,
        Tensor::from_vec(Shape::new(s.n, s.c - c_first, s.h, s.w), b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_mask() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 1, 3), &[-1., 0., 2.]).unwrap();
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let g = relu_backward(&x, &Tensor::filled(x.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0., 0., 1.]);
    }

    #[test]
    fn upsample_single_pixel() {
        let x = Tensor::<f32>::from_f64(Shape::new(1, 1, 1, 1), &[5.]).unwrap();
        let u = upsample_nearest2x(&x);
        assert_eq!(u.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(u.data(), &[5.; 4]);
        let g = upsample_nearest2x_backward(&Tensor::<f32>::filled(u.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[4.0]);
    }

    #[test]
    fn upsample_then_average_pool_is_identity() {
        let v: Vec<f64> = (0..2 * 3 * 3 * 4).map(|i| (i as f64).sin()).collect();
        let x = Tensor::<f64>::from_f64(Shape::new(2, 3, 3, 4), &v).unwrap();
        let u = upsample_nearest2x(&x);
        // 2x2 average pool written out directly.
        let s = u.shape();
        let mut avg = Tensor::<f64>::zeros(x.shape());
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h / 2 {
                    for x_ in 0..s.w / 2 {
                        let m = (u.at(n, c, 2 * y, 2 * x_)
                            + u.at(n, c, 2 * y + 1, 2 * x_)
                            + u.at(n, c, 2 * y, 2 * x_ + 1)
                            + u.at(n, c, 2 * y + 1, 2 * x_ + 1))
                            / 4.0;
                        avg.set(n, c, y, x_, m);
                    }
                }
            }
        }
        assert_eq!(avg, x);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::<f32>::from_f64(Shape::new(2, 1, 1, 2), &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_f64(Shape::new(2, 2, 1, 2), &[5., 6., 7., 8., 9., 10., 11., 12.])
            .unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}
