use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gemm_strided, pad, pad_backward, PaddingMode, Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Geometry of a 2-D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub mode: PaddingMode,
}

impl ConvSpec {
    /// Stride-1 "same" convolution with a square odd kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, mode: PaddingMode) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            pad: kernel / 2,
            mode,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().len()
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    /// Output spatial dims for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("stride and kernel dims must be positive"));
        }
        if ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}: non-positive output dims"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }
}

/// What [`conv2d_backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvTape<T> {
    padded: Tensor<T>,
    weights: Tensor<T>,
    input_shape: Shape,
    output_shape: Shape,
    spec: ConvSpec,
}

impl<T: Scalar> ConvTape<T> {
    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Budget for one unrolled block, sized to stay in L2.
const BLOCK_BYTES: usize = 512 * 1024;

/// Output rows per unrolled block.
fn block_rows<T>(spec: &ConvSpec, oh: usize, ow: usize) -> usize {
    let row_bytes = spec.patch_len() * ow * std::mem::size_of::<T>();
    (BLOCK_BYTES / row_bytes.max(1)).clamp(1, oh.max(1))
}

/// Unrolls the receptive fields of output rows `rows` of one padded batch
/// item into a `patch_len x (rows.len() * ow)` matrix.
fn im2col<T: Scalar>(item: &[T], ph: usize, pw: usize, spec: &ConvSpec, rows: Range<usize>, ow: usize, cols: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let s = spec.stride;
    let n = rows.len() * ow;
    for ci in 0..spec.in_channels {
        let plane = &item[ci * ph * pw..(ci + 1) * ph * pw];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[r * n..(r + 1) * n];
                for (i, oy) in rows.clone().enumerate() {
                    let src = &plane[(oy * s + ky) * pw + kx..];
                    let out = &mut dst[i * ow..(i + 1) * ow];
                    if s == 1 {
                        out.copy_from_slice(&src[..ow]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src[ox * s];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds an unrolled block gradient back onto one padded batch item.
fn col2im<T: Scalar>(cols: &[T], ph: usize, pw: usize, spec: &ConvSpec, rows: Range<usize>, ow: usize, item: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let s = spec.stride;
    let n = rows.len() * ow;
    for ci in 0..spec.in_channels {
        let plane = &mut item[ci * ph * pw..(ci + 1) * ph * pw];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let src = &cols[r * n..(r + 1) * n];
                for (i, oy) in rows.clone().enumerate() {
                    let row = &src[i * ow..(i + 1) * ow];
                    let base = (oy * s + ky) * pw + kx;
                    if s == 1 {
                        for (d, &v) in plane[base..base + ow].iter_mut().zip(row) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in row.iter().enumerate() {
                            plane[base + ox * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) of the padded input with `weights`.
pub fn conv2d_forward<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    spec: &ConvSpec,
    rng: &mut R,
) -> Result<(Tensor<T>, ConvTape<T>)> {
    let s = input.shape();
    if s.c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, conv expects {}",
            s.c, spec.in_channels
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "weights {} do not match conv {}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::shape(format!(
            "bias length {} != out channels {}",
            bias.len(),
            spec.out_channels
        )));
    }
    let (oh, ow) = spec.output_dims(s.h, s.w)?;
    let padded = pad(input, spec.pad, spec.mode, rng)?;
    let (ph, pw) = (padded.shape().h, padded.shape().w);
    let out_shape = Shape::new(s.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let npix = oh * ow;
    let k = spec.patch_len();
    let cout = spec.out_channels;
    let block = block_rows::<T>(spec, oh, ow);
    let direct = spec.stride == 1;
    out.data_mut()
        .par_chunks_mut(cout * npix)
        .enumerate()
        .for_each_init(Vec::new, |cols: &mut Vec<T>, (n, out_n)| {
            let item = padded.item(n);
            let done = direct
                && match (T::as_f32(item), T::as_f32(weights.data()), T::as_f32_mut(out_n)) {
                    (Some(x), Some(w), Some(o)) => {
                        super::direct::correlate(x, spec.in_channels, ph, pw, w, cout, spec.kernel, o)
                    }
                    _ => false,
                };
            if !done {
                cols.resize(k * block * ow, T::zero());
                for y0 in (0..oh).step_by(block) {
                    let rows = y0..(y0 + block).min(oh);
                    let cn = rows.len() * ow;
                    im2col(item, ph, pw, spec, rows, ow, cols);
                    gemm_strided(
                        cout,
                        k,
                        cn,
                        weights.data(),
                        (k, 1),
                        cols,
                        (cn, 1),
                        &mut out_n[y0 * ow..],
                        npix,
                        false,
                    );
                }
            }
            for (o, &b) in bias.iter().enumerate() {
                for v in &mut out_n[o * npix..(o + 1) * npix] {
                    *v += b;
                }
            }
        });
    let tape = ConvTape {
        padded,
        weights: weights.clone(),
        input_shape: s,
        output_shape: out_shape,
        spec: *spec,
    };
    Ok((out, tape))
}

/// Stride-1 backward for batch item `n` through the direct kernels.
/// Returns `false` when they cannot run; `dw` and `grad_padded` are then
/// still zero.
fn direct_backward<T: Scalar>(
    tape: &ConvTape<T>,
    n: usize,
    dy: &[T],
    flipped: &[T],
    dw: &mut [T],
    grad_padded: &mut [T],
) -> bool {
    let spec = &tape.spec;
    let ps = tape.padded.shape();
    let (oh, ow) = (tape.output_shape.h, tape.output_shape.w);
    let (kh, kw) = spec.kernel;
    let cout = spec.out_channels;
    let (Some(x), Some(dy), Some(flipped), Some(dw), Some(gp)) = (
        T::as_f32(tape.padded.item(n)),
        T::as_f32(dy),
        T::as_f32(flipped),
        T::as_f32_mut(dw),
        T::as_f32_mut(grad_padded),
    ) else {
        return false;
    };
    if !super::direct::weight_grad(x, spec.in_channels, ps.h, ps.w, dy, cout, spec.kernel, dw) {
        return false;
    }
    // Zero-pad the upstream gradient by `kernel - 1` on every side.
    let (qh, qw) = (oh + 2 * (kh - 1), ow + 2 * (kw - 1));
    let mut padded_dy = vec![0.0f32; cout * qh * qw];
    for c in 0..cout {
        for y in 0..oh {
            let at = (c * qh + y + kh - 1) * qw + kw - 1;
            padded_dy[at..at + ow].copy_from_slice(&dy[(c * oh + y) * ow..(c * oh + y + 1) * ow]);
        }
    }
    super::direct::correlate(&padded_dy, cout, qh, qw, flipped, spec.in_channels, spec.kernel, gp)
}

/// Vector-Jacobian product of [`conv2d_forward`], including the adjoint of
/// the padding operator.
pub fn conv2d_backward<T: Scalar>(tape: &ConvTape<T>, upstream: &Tensor<T>) -> Result<ConvGrads<T>> {
    if upstream.shape() != tape.output_shape {
        return Err(Error::shape(format!(
            "upstream gradient {} does not match conv output {}",
            upstream.shape(),
            tape.output_shape
        )));
    }
    let spec = &tape.spec;
    let ps = tape.padded.shape();
    let (oh, ow) = (tape.output_shape.h, tape.output_shape.w);
    let npix = oh * ow;
    let k = spec.patch_len();
    let cout = spec.out_channels;

    let mut bias = vec![T::zero(); cout];
    for n in 0..ps.n {
        for (o, b) in bias.iter_mut().enumerate() {
            *b += upstream.plane(n, o).iter().copied().sum::<T>();
        }
    }

    let block = block_rows::<T>(spec, oh, ow);
    let (kh, kw) = spec.kernel;
    // Transposed, flipped weights turn the input gradient into a forward
    // correlation of the zero-padded upstream gradient.
    let flipped: Vec<T> = if spec.stride == 1 {
        let w = tape.weights.data();
        let mut f = vec![T::zero(); w.len()];
        for co in 0..cout {
            for ci in 0..spec.in_channels {
                for ky in 0..kh {
                    for kx in 0..kw {
                        f[((ci * cout + co) * kh + kh - 1 - ky) * kw + kw - 1 - kx] =
                            w[((co * spec.in_channels + ci) * kh + ky) * kw + kx];
                    }
                }
            }
        }
        f
    } else {
        Vec::new()
    };
    let mut grad_padded = Tensor::zeros(ps);
    let weight_parts: Vec<Vec<T>> = grad_padded
        .data_mut()
        .par_chunks_mut(ps.item())
        .enumerate()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(cols, dcols): &mut (Vec<T>, Vec<T>), (n, gp_n)| {
                let dy = upstream.item(n);
                let mut dw = vec![T::zero(); cout * k];
                if spec.stride == 1 && direct_backward(tape, n, dy, &flipped, &mut dw, gp_n) {
                    return dw;
                }
                cols.resize(k * block * ow, T::zero());
                dcols.resize(k * block * ow, T::zero());
                for y0 in (0..oh).step_by(block) {
                    let rows = y0..(y0 + block).min(oh);
                    let cn = rows.len() * ow;
                    let dy_block = &dy[y0 * ow..];
                    im2col(tape.padded.item(n), ps.h, ps.w, spec, rows.clone(), ow, cols);
                    // dW += dY_block * cols^T
                    gemm_strided(cout, cn, k, dy_block, (npix, 1), cols, (1, cn), &mut dw, k, true);
                    // dcols = W^T * dY_block
                    let w = tape.weights.data();
                    gemm_strided(k, cout, cn, w, (1, k), dy_block, (npix, 1), dcols, cn, false);
                    col2im(dcols, ps.h, ps.w, spec, rows, ow, gp_n);
                }
                dw
            },
        )
        .collect();

    // Fixed reduction order keeps the result independent of worker count.
    let mut dw = vec![T::zero(); cout * k];
    for part in &weight_parts {
        for (acc, &v) in dw.iter_mut().zip(part) {
            *acc += v;
        }
    }
    let input = pad_backward(&grad_padded, spec.pad, spec.mode, tape.input_shape)?;
    Ok(ConvGrads {
        input,
        weights: Tensor::from_vec(spec.weight_shape(), dw)?,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Direct-summation oracle, independent of im2col/gemm.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: &ConvSpec) -> Tensor<f64> {
        let p = pad(x, spec.pad, spec.mode, &mut stream(0)).unwrap();
        let s = x.shape();
        let (oh, ow) = spec.output_dims(s.h, s.w).unwrap();
        let mut out = Tensor::zeros(Shape::new(s.n, spec.out_channels, oh, ow));
        for n in 0..s.n {
            for o in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..s.c {
                            for ky in 0..spec.kernel.0 {
                                for kx in 0..spec.kernel.1 {
                                    acc += w.at(o, c, ky, kx)
                                        * p.at(n, c, oy * spec.stride + ky, ox * spec.stride + kx);
                                }
                            }
                        }
                        out.set(n, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed);
        let v: Vec<f64> = (0..shape.len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 1, 1), &[5.0]).unwrap();
        let w = Tensor::<f64>::from_f64(Shape::new(1, 1, 1, 1), &[2.0]).unwrap();
        let spec = ConvSpec::same(1, 1, 1, PaddingMode::Zero);
        let (y, _) = conv2d_forward(&x, &w, &[0.0], &spec, &mut stream(0)).unwrap();
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn all_ones_kernel_on_three_by_three() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.])
            .unwrap();
        let w = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2), 1.0);
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (2, 2),
            stride: 1,
            pad: 0,
            mode: PaddingMode::Zero,
        };
        let (y, _) = conv2d_forward(&x, &w, &[0.0], &spec, &mut stream(0)).unwrap();
        assert_eq!(y.data(), &[12., 16., 24., 28.]);
        assert_eq!(y, conv_direct(&x, &w, &[0.0], &spec));
    }

    #[test]
    fn delta_kernel_is_identity_and_backward_passes_through() {
        let x = random(Shape::new(2, 1, 5, 4), 3);
        let mut w = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let spec = ConvSpec::same(1, 1, 3, PaddingMode::Zero);
        let (y, tape) = conv2d_forward(&x, &w, &[0.0], &spec, &mut stream(0)).unwrap();
        assert_eq!(y, x);
        let g = conv2d_backward(&tape, &Tensor::filled(y.shape(), 1.0)).unwrap();
        assert_eq!(g.input.data(), &vec![1.0; x.len()][..]);
    }

    #[test]
    fn matches_direct_summation_for_all_modes_and_strides() {
        for (i, mode) in [
            PaddingMode::Zero,
            PaddingMode::Circular,
            PaddingMode::Reflect,
        ]
        .into_iter()
        .enumerate()
        {
            for stride in [1, 2] {
                let spec = ConvSpec {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: (3, 3),
                    stride,
                    pad: 1,
                    mode,
                };
                let x = random(Shape::new(2, 3, 6, 7), 10 + i as u64);
                let w = random(spec.weight_shape(), 20 + i as u64);
                let b = [0.25, -0.5];
                let (y, _) = conv2d_forward(&x, &w, &b, &spec, &mut stream(0)).unwrap();
                let want = conv_direct(&x, &w, &b, &spec);
                assert!(y.max_abs_diff(&want) < 1e-12, "{mode:?} stride {stride}");
            }
        }
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let spec = ConvSpec::same(2, 3, 3, PaddingMode::Circular);
        let x = random(Shape::new(2, 2, 4, 4), 1);
        let w = random(spec.weight_shape(), 2);
        let (y, tape) = conv2d_forward(&x, &w, &[0.0; 3], &spec, &mut stream(0)).unwrap();
        let up = random(y.shape(), 4);
        let g = conv2d_backward(&tape, &up).unwrap();
        for o in 0..3 {
            let want: f64 = (0..2).map(|n| up.plane(n, o).iter().sum::<f64>()).sum();
            assert!((g.bias[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let spec = ConvSpec::same(2, 1, 3, PaddingMode::Zero);
        let x = random(Shape::new(1, 1, 4, 4), 0);
        let w = random(spec.weight_shape(), 0);
        assert!(conv2d_forward(&x, &w, &[0.0], &spec, &mut stream(0)).is_err());
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (5, 5),
            stride: 1,
            pad: 0,
            mode: PaddingMode::Zero,
        };
        let w = random(spec.weight_shape(), 0);
        let x = random(Shape::new(1, 1, 3, 3), 0);
        assert!(matches!(
            conv2d_forward(&x, &w, &[0.0], &spec, &mut stream(0)),
            Err(Error::Shape(_))
        ));
        let spec = ConvSpec::same(1, 1, 3, PaddingMode::Zero);
        let x = random(Shape::new(1, 1, 4, 4), 0);
        let w = random(spec.weight_shape(), 0);
        let (_, tape) = conv2d_forward(&x, &w, &[0.0], &spec, &mut stream(0)).unwrap();
        assert!(conv2d_backward(&tape, &random(Shape::new(1, 1, 3, 4), 0)).is_err());
    }

    #[test]
    fn f32_kernels_agree_with_f64() {
        // f32 stride-1 layers take the direct kernels where available; f64
        // always takes im2col/GEMM.
        let modes = [
            PaddingMode::Zero,
            PaddingMode::Circular,
            PaddingMode::Reflect,
            PaddingMode::Random { amplitude: 1.0 },
        ];
        for (i, mode) in modes.into_iter().enumerate() {
            for &(cin, cout, h, w, k) in &[(3, 5, 6, 27, 3), (2, 9, 8, 8, 1), (4, 2, 5, 11, 5)] {
                let spec = ConvSpec::same(cin, cout, k, mode);
                let x = random(Shape::new(2, cin, h, w), 10 + i as u64);
                let wt = random(spec.weight_shape(), 20);
                let b: Vec<f64> = (0..cout).map(|c| c as f64 * 0.1).collect();
                let up = random(Shape::new(2, cout, h, w), 30);
                let (y64, t64) = conv2d_forward(&x, &wt, &b, &spec, &mut stream(1)).unwrap();
                let g64 = conv2d_backward(&t64, &up).unwrap();
                let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
                let (y32, t32) = conv2d_forward(&x.cast::<f32>(), &wt.cast(), &b32, &spec, &mut stream(1)).unwrap();
                let g32 = conv2d_backward(&t32, &up.cast()).unwrap();
                assert!(y32.cast::<f64>().max_abs_diff(&y64) < 1e-4);
                assert!(g32.input.cast::<f64>().max_abs_diff(&g64.input) < 1e-4);
                assert!(g32.weights.cast::<f64>().max_abs_diff(&g64.weights) < 1e-3);
            }
        }
    }

}
