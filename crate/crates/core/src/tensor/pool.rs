use super::{Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Output of a 2x2 max pool together with the flat input index that won
/// each window.
#[derive(Clone, Debug)]
pub struct PoolRecord<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
    pub input_shape: Shape,
}

/// 2x2 / stride 2 max pooling. Ties go to the lowest flat index.
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<PoolRecord<T>> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!(
            "max pool needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.len());
    let mut argmax = Vec::with_capacity(os.len());
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let top = s.index(n, c, 2 * oy, 2 * ox);
                    let mut best = top;
                    for idx in [top + 1, top + s.w, top + s.w + 1] {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok(PoolRecord {
        output: Tensor::from_vec(os, out)?,
        argmax,
        input_shape: s,
    })
}

/// Routes each upstream value to the recorded argmax cell.
pub fn maxpool2x2_backward<T: Scalar>(record: &PoolRecord<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != record.output.shape() {
        return Err(Error::shape(format!(
            "upstream gradient {} does not match pool output {}",
            upstream.shape(),
            record.output.shape()
        )));
    }
    let mut grad = Tensor::zeros(record.input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in record.argmax.iter().zip(upstream.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn single_window() {
        let x = Tensor::<f32>::from_f64(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]).unwrap();
        let r = maxpool2x2_forward(&x).unwrap();
        assert_eq!(r.output.data(), &[4.0]);
        assert_eq!(r.argmax, vec![3]);
        let g = maxpool2x2_backward(&r, &Tensor::filled(r.output.shape(), 2.5)).unwrap();
        assert_eq!(g.data(), &[0., 0., 0., 2.5]);
    }

    #[test]
    fn ties_pick_top_left() {
        let x = Tensor::<f32>::filled(Shape::new(1, 1, 2, 2), 7.0);
        let r = maxpool2x2_forward(&x).unwrap();
        assert_eq!(r.output.data(), &[7.0]);
        assert_eq!(r.argmax, vec![0]);
        let g = maxpool2x2_backward(&r, &Tensor::filled(r.output.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn matches_exhaustive_window_max() {
        let mut rng = stream(9);
        let v: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 4, 4), &v).unwrap();
        let r = maxpool2x2_forward(&x).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.at(0, 0, 2 * oy + dy, 2 * ox + dx));
                    }
                }
                assert_eq!(r.output.at(0, 0, oy, ox), m);
            }
        }
        for (o, &idx) in r.argmax.iter().enumerate() {
            let (oy, ox) = (o / 2, o % 2);
            let (y, x_) = (idx / 4, idx % 4);
            assert!(y / 2 == oy && x_ / 2 == ox, "argmax outside its window");
        }
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4));
        assert!(matches!(maxpool2x2_forward(&x), Err(Error::Shape(_))));
    }
}
