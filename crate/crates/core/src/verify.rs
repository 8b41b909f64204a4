//! Built-in verification: gradient checks of every differentiable op and of
//! whole U-Nets, and the circular-shift equivariance measurement.

use rand::Rng;

use crate::augment::{edge_block_drop, edge_block_drop_backward, EdgeDropSpec};
use crate::rng::{child_stream, stream};
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, gradcheck, gradcheck_scalar, maxpool2x2_backward,
    maxpool2x2_forward, pad, pad_backward, relu, relu_backward, softmax_cross_entropy_pixelwise, split_channels,
    upsample_nearest2x, upsample_nearest2x_backward, ConvSpec, GradcheckReport, PaddingMode,
};
use crate::unet::{build_unet, ForwardOptions, Model, UNetConfig};
use crate::{Precision, Result, Shape, Tensor};

/// Largest relative error accepted for a single op.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Largest relative error accepted for a whole model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

pub const PADDING_MODES: [PaddingMode; 4] = [
    PaddingMode::Zero,
    PaddingMode::Circular,
    PaddingMode::Reflect,
    PaddingMode::Random { amplitude: 0.5 },
];

fn mode_name(mode: PaddingMode) -> &'static str {
    match mode {
        PaddingMode::Zero => "zero",
        PaddingMode::Circular => "circular",
        PaddingMode::Reflect => "reflect",
        PaddingMode::Random { .. } => "random",
    }
}

fn random_tensor<R: Rng>(shape: Shape, rng: &mut R) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

/// Entries bounded away from zero, so ReLU kinks are outside the
/// finite-difference stencil.
fn away_from_zero<R: Rng>(shape: Shape, rng: &mut R) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.len())
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

fn small_shape<R: Rng>(rng: &mut R, even: bool) -> Shape {
    let dim = |rng: &mut R| {
        let d = rng.gen_range(3..=6);
        if even {
            d & !1
        } else {
            d
        }
    };
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (dim(rng), dim(rng));
    Shape::new(n, c, h, w)
}

fn op_checks(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    let mut case = 0u64;
    let mut next_rng = || {
        case += 1;
        child_stream(seed, case)
    };

    for mode in PADDING_MODES {
        let mut rng = next_rng();
        let shape = small_shape(&mut rng, false);
        let amount = rng.gen_range(1..=2);
        let x = random_tensor(shape, &mut rng);
        let fill = rng.gen::<u64>();
        out.push(gradcheck(
            &format!("pad/{} {shape} by {amount}", mode_name(mode)),
            &x,
            |t| pad(t, amount, mode, &mut stream(fill)).expect("valid pad"),
            |_, u| pad_backward(u, amount, mode, shape).expect("valid pad backward"),
            OP_TOLERANCE,
            rng.gen(),
        ));
    }

    let mut conv_specs: Vec<ConvSpec> = Vec::new();
    for mode in PADDING_MODES {
        for k in [1, 3, 5] {
            conv_specs.push(ConvSpec::same(0, 0, k, mode));
        }
    }
    conv_specs.push(ConvSpec {
        stride: 2,
        ..ConvSpec::same(0, 0, 3, PaddingMode::Zero)
    });
    for template in conv_specs {
        let mut rng = next_rng();
        let mut shape = small_shape(&mut rng, false);
        shape.h = shape.h.max(template.kernel.0);
        shape.w = shape.w.max(template.kernel.1);
        let spec = ConvSpec {
            in_channels: shape.c,
            out_channels: rng.gen_range(1..=3),
            ..template
        };
        let x = random_tensor(shape, &mut rng);
        let w = random_tensor(spec.weight_shape(), &mut rng);
        let b: Vec<f64> = (0..spec.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fill = rng.gen::<u64>();
        let label = format!(
            "conv2d/{} k{} s{} {shape} -> {}",
            mode_name(spec.mode),
            spec.kernel.0,
            spec.stride,
            spec.out_channels
        );
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| {
            conv2d_forward(x, w, b, &spec, &mut stream(fill)).expect("valid conv")
        };
        out.push(gradcheck(
            &format!("{label} d/dx"),
            &x,
            |t| run(t, &w, &b).0,
            |t, u| conv2d_backward(&run(t, &w, &b).1, u).expect("conv backward").input,
            OP_TOLERANCE,
            rng.gen(),
        ));
        out.push(gradcheck(
            &format!("{label} d/dw"),
            &w,
            |t| run(&x, t, &b).0,
            |t, u| conv2d_backward(&run(&x, t, &b).1, u).expect("conv backward").weights,
            OP_TOLERANCE,
            rng.gen(),
        ));
        let (y, tape) = run(&x, &w, &b);
        let u = random_tensor(y.shape(), &mut rng);
        let db = conv2d_backward(&tape, &u)?.bias;
        out.push(gradcheck_scalar(
            &format!("{label} d/db"),
            &b,
            |bb| {
                run(&x, &w, bb)
                    .0
                    .data()
                    .iter()
                    .zip(u.data())
                    .map(|(a, c)| a * c)
                    .sum()
            },
            &db,
            None,
            OP_TOLERANCE,
        ));
    }

    let mut rng = next_rng();
    let shape = small_shape(&mut rng, false);
    out.push(gradcheck(
        &format!("relu {shape}"),
        &away_from_zero(shape, &mut rng),
        relu,
        |t, u| relu_backward(t, u).expect("relu backward"),
        OP_TOLERANCE,
        rng.gen(),
    ));

    let mut rng = next_rng();
    let shape = small_shape(&mut rng, true);
    out.push(gradcheck(
        &format!("maxpool2x2 {shape}"),
        &random_tensor(shape, &mut rng),
        |t| maxpool2x2_forward(t).expect("pool").output,
        |t, u| maxpool2x2_backward(&maxpool2x2_forward(t).expect("pool"), u).expect("pool backward"),
        OP_TOLERANCE,
        rng.gen(),
    ));

    let mut rng = next_rng();
    let shape = small_shape(&mut rng, false);
    out.push(gradcheck(
        &format!("upsample_nearest2x {shape}"),
        &random_tensor(shape, &mut rng),
        upsample_nearest2x,
        |_, u| upsample_nearest2x_backward(u).expect("upsample backward"),
        OP_TOLERANCE,
        rng.gen(),
    ));

    let mut rng = next_rng();
    let shape = small_shape(&mut rng, false);
    let other = random_tensor(Shape { c: 2, ..shape }, &mut rng);
    out.push(gradcheck(
        &format!("concat_channels {shape}"),
        &random_tensor(shape, &mut rng),
        |t| concat_channels(t, &other).expect("concat"),
        |_, u| split_channels(u, shape.c).expect("split").0,
        OP_TOLERANCE,
        rng.gen(),
    ));
    let whole = Shape { c: shape.c + 2, ..shape };
    out.push(gradcheck(
        &format!("split_channels {whole}"),
        &random_tensor(whole, &mut rng),
        |t| split_channels(t, 2).expect("split").1,
        |_, u| {
            let zeros = Tensor::zeros(Shape { c: 2, ..shape });
            concat_channels(&zeros, u).expect("concat")
        },
        OP_TOLERANCE,
        rng.gen(),
    ));

    let mut rng = next_rng();
    let shape = Shape::new(rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=4), rng.gen_range(2..=4));
    let logits = random_tensor(shape, &mut rng);
    let target: Vec<u8> = (0..shape.n * shape.plane())
        .map(|_| rng.gen_range(0..shape.c) as u8)
        .collect();
    let ce = softmax_cross_entropy_pixelwise(&logits, &target)?;
    out.push(gradcheck_scalar(
        &format!("softmax_cross_entropy {shape}"),
        logits.data(),
        |l| {
            let t = Tensor::from_vec(shape, l.to_vec()).expect("same shape");
            softmax_cross_entropy_pixelwise(&t, &target).expect("loss").loss
        },
        ce.grad.data(),
        None,
        OP_TOLERANCE,
    ));

    let mut rng = next_rng();
    let shape = Shape::new(3, 2, 6, 5);
    let spec = EdgeDropSpec {
        probability: 1.0,
        ..EdgeDropSpec::default()
    };
    let mask_seed = rng.gen::<u64>();
    out.push(gradcheck(
        &format!("edge_block_drop {shape}"),
        &random_tensor(shape, &mut rng),
        |t| edge_block_drop(t, &spec, &mut stream(mask_seed), true).expect("drop").0,
        |t, u| {
            let (_, mask) = edge_block_drop(t, &spec, &mut stream(mask_seed), true).expect("drop");
            edge_block_drop_backward(&mask, u).expect("drop backward")
        },
        OP_TOLERANCE,
        rng.gen(),
    ));
    Ok(out)
}

/// Mean cross-entropy of `model` with parameters replaced by `params`.
fn loss_with(
    model: &Model<f64>,
    params: Option<&[f64]>,
    x: &Tensor<f64>,
    target: &[u8],
    forward_seed: u64,
    options: &ForwardOptions,
) -> f64 {
    let mut m = model.clone();
    if let Some(p) = params {
        let mut offset = 0;
        for dst in m.params_mut() {
            let n = dst.len();
            dst.copy_from_slice(&p[offset..offset + n]);
            offset += n;
        }
    }
    let (logits, _) = m.forward_with(x, &mut stream(forward_seed), options).expect("forward");
    softmax_cross_entropy_pixelwise(&logits, target).expect("loss").loss
}

/// Parameter and input gradients of a small randomly initialized U-Net.
fn model_checks(seed: u64) -> Result<Vec<GradcheckReport>> {
    let cases = [
        (2, PaddingMode::Zero, None),
        (3, PaddingMode::Zero, None),
        (3, PaddingMode::Circular, None),
        (2, PaddingMode::Reflect, None),
        (2, PaddingMode::Random { amplitude: 0.5 }, None),
        (
            2,
            PaddingMode::Zero,
            Some(EdgeDropSpec {
                probability: 1.0,
                ..EdgeDropSpec::default()
            }),
        ),
    ];
    let mut out = Vec::new();
    for (i, (depth, padding, edge_drop)) in cases.into_iter().enumerate() {
        let mut rng = child_stream(seed, 1000 + i as u64);
        let config = UNetConfig {
            depth,
            base_channels: 2,
            num_classes: 3,
            padding,
            precision: Precision::F64,
            seed: rng.gen(),
            ..UNetConfig::default()
        };
        let mut model = build_unet::<f64>(&config)?;
        // Zero-initialized biases put pre-activations fed only by zero
        // padding exactly on the ReLU kink.
        for bias in model.params_mut().into_iter().skip(1).step_by(2) {
            for b in bias {
                *b = rng.gen_range(-0.2..0.2);
            }
        }
        let m = config.size_multiple();
        let shape = Shape::new(2, 1, 2 * m, 3 * m.max(2));
        let x = random_tensor(shape, &mut rng);
        let target: Vec<u8> = (0..shape.n * shape.plane()).map(|_| rng.gen_range(0..3)).collect();
        let options = ForwardOptions {
            edge_drop,
            training: edge_drop.is_some(),
        };
        let forward_seed = rng.gen::<u64>();
        let (logits, tape) = model.forward_with(&x, &mut stream(forward_seed), &options)?;
        let ce = softmax_cross_entropy_pixelwise(&logits, &target)?;
        let grads = model.backward(&tape, &ce.grad)?;
        let flat_grad: Vec<f64> = grads.flat().concat();
        let flat_params: Vec<f64> = model.params().concat();
        let label = format!(
            "unet depth {depth} {}{} {shape}",
            mode_name(padding),
            if edge_drop.is_some() { " +edge_drop" } else { "" }
        );
        out.push(gradcheck_scalar(
            &format!("{label} d/dparams"),
            &flat_params,
            |p| loss_with(&model, Some(p), &x, &target, forward_seed, &options),
            &flat_grad,
            None,
            MODEL_TOLERANCE,
        ));
        out.push(gradcheck_scalar(
            &format!("{label} d/dinput"),
            x.data(),
            |p| {
                let t = Tensor::from_vec(shape, p.to_vec()).expect("same shape");
                loss_with(&model, None, &t, &target, forward_seed, &options)
            },
            grads.input.data(),
            None,
            MODEL_TOLERANCE,
        ));
    }
    Ok(out)
}

/// Every op check followed by the whole-model checks, all in f64.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut all = op_checks(seed)?;
    all.extend(model_checks(seed)?);
    Ok(all)
}

/// Largest deviation from circular-shift equivariance, one per trial.
///
/// Each trial draws an `h x w` input and a shift that is a multiple of the
/// model's total pooling stride, then compares `model(roll(x))` with
/// `roll(model(x))`.
pub fn equivariance_errors(
    padding: PaddingMode,
    (h, w): (usize, usize),
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let config = UNetConfig {
        depth: 3,
        padding,
        precision: Precision::F32,
        seed,
        ..UNetConfig::default()
    };
    let model = build_unet::<f32>(&config)?;
    let stride = config.size_multiple() as isize;
    let mut rng = child_stream(seed, 1);
    (0..trials)
        .map(|_| {
            let data: Vec<f32> = (0..h * w).map(|_| rng.gen()).collect();
            let x = Tensor::from_vec(Shape::new(1, 1, h, w), data)?;
            let dy = stride * rng.gen_range(1..(h as isize / stride).max(2));
            let dx = stride * rng.gen_range(1..(w as isize / stride).max(2));
            let (y, _) = model.forward(&x, &mut stream(0))?;
            let (ys, _) = model.forward(&x.roll(dy, dx), &mut stream(0))?;
            Ok(ys.max_abs_diff(&y.roll(dy, dx)))
        })
        .collect()
}
