//! A small U-Net for the composite digit segmentation task.
//!
//! Encoder level `i` has `base_channels * 2^i` channels and runs
//! `[conv3x3, relu] x 2`, preceded by a 2x2 max pool for every level but the
//! first. The decoder mirrors it: nearest 2x upsampling, channel
//! concatenation with the encoder skip (upsampled channels first), then
//! `[conv3x3, relu] x 2`. A 1x1 convolution maps to class logits.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{edge_block_drop, edge_block_drop_backward, DropMask, EdgeDropSpec};
use crate::rng::stream;
use crate::tensor::{
    adam_step, concat_channels, conv2d_backward, conv2d_forward, maxpool2x2_backward,
    maxpool2x2_forward, relu, relu_backward, softmax_cross_entropy_pixelwise, split_channels,
    upsample_nearest2x, upsample_nearest2x_backward, AdamState, ConvSpec, ConvTape, PaddingMode,
    PoolRecord, Precision, Scalar, Shape, Tensor,
};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry};

/// Name of the final 1x1 classification layer.
pub const HEAD: &str = "head";

/// Architecture and initialisation of a [`Model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Encoder levels; `depth - 1` pooling steps.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    /// Background plus ten digit classes.
    pub num_classes: usize,
    pub padding: PaddingMode,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            num_classes: 11,
            padding: PaddingMode::Zero,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("unet depth must be >= 1"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::config("unet channel counts must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("unet needs at least 2 classes"));
        }
        if self.depth > 16 {
            return Err(Error::config("unet depth is unreasonably large"));
        }
        self.padding.validate()
    }

    /// Channels of encoder level `i`.
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let c = |i| self.level_channels(i);
        let block = |cin: usize, cout: usize| cin * cout * 9 + cout + cout * cout * 9 + cout;
        let mut total = 0;
        for i in 0..self.depth {
            let cin = if i == 0 { self.in_channels } else { c(i - 1) };
            total += block(cin, c(i));
        }
        for i in 0..self.depth - 1 {
            total += block(c(i + 1) + c(i), c(i));
        }
        total + c(0) * self.num_classes + self.num_classes
    }

    /// Layer names and conv geometry in declaration order.
    pub fn layer_specs(&self) -> Vec<(String, ConvSpec)> {
        let mode = self.padding;
        let mut out = Vec::new();
        for i in 0..self.depth {
            let cin = if i == 0 {
                self.in_channels
            } else {
                self.level_channels(i - 1)
            };
            let c = self.level_channels(i);
            out.push((format!("enc{i}.a"), ConvSpec::same(cin, c, 3, mode)));
            out.push((format!("enc{i}.b"), ConvSpec::same(c, c, 3, mode)));
        }
        for i in (0..self.depth - 1).rev() {
            let c = self.level_channels(i);
            let cin = self.level_channels(i + 1) + c;
            out.push((format!("dec{i}.a"), ConvSpec::same(cin, c, 3, mode)));
            out.push((format!("dec{i}.b"), ConvSpec::same(c, c, 3, mode)));
        }
        out.push((
            HEAD.to_string(),
            ConvSpec::same(self.level_channels(0), self.num_classes, 1, mode),
        ));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// A U-Net with concrete weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: UNetConfig,
    layers: Vec<ConvLayer<T>>,
}

/// Per-layer gradients, in layer order, plus the input gradient.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Weight and bias arrays interleaved, matching [`Model::params_mut`].
    pub fn flat(&self) -> Vec<&[T]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }
}

/// Training-time behaviour of a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Edge block drop after every hidden activation.
    pub edge_drop: Option<EdgeDropSpec>,
    pub training: bool,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    input_shape: Shape,
    convs: Vec<Option<ConvTape<T>>>,
    pre: Vec<Option<Tensor<T>>>,
    drops: Vec<Option<DropMask>>,
    pools: Vec<PoolRecord<T>>,
}

/// Builds a U-Net with He-uniform weights drawn from `config.seed` and
/// zero biases. The linear head uses the gain-1 bound `sqrt(1 / fan_in)`.
pub fn build_unet<T: Scalar>(config: &UNetConfig) -> Result<Model<T>> {
    config.validate()?;
    if config.precision != T::PRECISION {
        return Err(Error::Precision {
            expected: config.precision.name(),
            found: T::PRECISION.name(),
        });
    }
    let mut rng = stream(config.seed);
    let layers = config
        .layer_specs()
        .into_iter()
        .map(|(name, spec)| {
            let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f64;
            let gain = if name == HEAD { 1.0 } else { 6.0 };
            let bound = (gain / fan_in).sqrt();
            let w: Vec<T> = (0..spec.weight_len())
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect();
            ConvLayer {
                name,
                weight: Tensor::from_vec(spec.weight_shape(), w).expect("weight shape"),
                bias: vec![T::zero(); spec.out_channels],
                spec,
            }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        layers,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Weight and bias arrays interleaved in layer order.
    pub fn params(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Fresh optimizer state sized for this model.
    pub fn adam_state(&self, config: crate::tensor::AdamConfig) -> AdamState<T> {
        AdamState::new(self.params().iter().map(|p| p.len()), config)
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.c != self.config.in_channels {
            return Err(Error::shape(format!(
                "batch has {} channels, model expects {}",
                s.c, self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if s.h == 0 || s.w == 0 || s.h % m != 0 || s.w % m != 0 {
            return Err(Error::shape(format!(
                "input {}x{} not divisible by {m} (depth {})",
                s.h, s.w, self.config.depth
            )));
        }
        Ok(())
    }

    /// Inference forward pass. Returns logits `(n, num_classes, h, w)`.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, Tape<T>)> {
        self.forward_with(batch, rng, &ForwardOptions::default())
    }

    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        rng: &mut R,
        options: &ForwardOptions,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(batch)?;
        let depth = self.config.depth;
        let nl = self.layers.len();
        let mut tape = Tape {
            input_shape: batch.shape(),
            convs: (0..nl).map(|_| None).collect(),
            pre: (0..nl).map(|_| None).collect(),
            drops: (0..nl).map(|_| None).collect(),
            pools: Vec::with_capacity(depth.saturating_sub(1)),
        };
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut x = batch.clone();
        for i in 0..depth {
            if i > 0 {
                let rec = maxpool2x2_forward(&x)?;
                x = rec.output.clone();
                tape.pools.push(rec);
            }
            x = self.hidden_forward(2 * i, &x, rng, options, &mut tape)?;
            x = self.hidden_forward(2 * i + 1, &x, rng, options, &mut tape)?;
            if i + 1 < depth {
                skips.push(x.clone());
            }
        }
        for (j, i) in (0..depth - 1).rev().enumerate() {
            let cat = concat_channels(&upsample_nearest2x(&x), &skips[i])?;
            let li = 2 * depth + 2 * j;
            x = self.hidden_forward(li, &cat, rng, options, &mut tape)?;
            x = self.hidden_forward(li + 1, &x, rng, options, &mut tape)?;
        }
        let head = nl - 1;
        let l = &self.layers[head];
        let (logits, ct) = conv2d_forward(&x, &l.weight, &l.bias, &l.spec, rng)?;
        tape.convs[head] = Some(ct);
        Ok((logits, tape))
    }

    fn hidden_forward<R: Rng + ?Sized>(
        &self,
        li: usize,
        x: &Tensor<T>,
        rng: &mut R,
        options: &ForwardOptions,
        tape: &mut Tape<T>,
    ) -> Result<Tensor<T>> {
        let l = &self.layers[li];
        let (y, ct) = conv2d_forward(x, &l.weight, &l.bias, &l.spec, rng)?;
        let mut a = relu(&y);
        tape.convs[li] = Some(ct);
        tape.pre[li] = Some(y);
        if let (Some(spec), true) = (&options.edge_drop, options.training) {
            let (dropped, mask) = edge_block_drop(&a, spec, rng, true)?;
            a = dropped;
            tape.drops[li] = Some(mask);
        }
        Ok(a)
    }

    fn hidden_backward(
        &self,
        li: usize,
        upstream: Tensor<T>,
        tape: &Tape<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let mut g = upstream;
        if let Some(mask) = &tape.drops[li] {
            g = edge_block_drop_backward(mask, &g)?;
        }
        let pre = tape.pre[li].as_ref().expect("forward recorded activation");
        g = relu_backward(pre, &g)?;
        self.conv_backward(li, &g, tape, grads)
    }

    fn conv_backward(
        &self,
        li: usize,
        upstream: &Tensor<T>,
        tape: &Tape<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let ct = tape.convs[li].as_ref().expect("forward recorded conv");
        let cg = conv2d_backward(ct, upstream)?;
        grads.weights[li] = cg.weights.into_data();
        grads.biases[li] = cg.bias;
        Ok(cg.input)
    }

    /// Gradients of `<grad_logits, logits>` with respect to every parameter
    /// and to the input.
    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let depth = self.config.depth;
        let nl = self.layers.len();
        let mut grads = Gradients {
            weights: vec![Vec::new(); nl],
            biases: vec![Vec::new(); nl],
            input: Tensor::zeros(tape.input_shape),
        };
        let mut g = self.conv_backward(nl - 1, grad_logits, tape, &mut grads)?;
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        // Decoder levels in reverse order of the forward pass.
        for i in 0..depth.saturating_sub(1) {
            let j = depth - 2 - i;
            let li = 2 * depth + 2 * j;
            g = self.hidden_backward(li + 1, g, tape, &mut grads)?;
            g = self.hidden_backward(li, g, tape, &mut grads)?;
            let (g_up, g_skip) = split_channels(&g, self.config.level_channels(i + 1))?;
            skip_grads[i] = Some(g_skip);
            g = upsample_nearest2x_backward(&g_up)?;
        }
        for i in (0..depth).rev() {
            if let Some(sg) = skip_grads[i].take() {
                for (a, &b) in g.data_mut().iter_mut().zip(sg.data()) {
                    *a += b;
                }
            }
            g = self.hidden_backward(2 * i + 1, g, tape, &mut grads)?;
            g = self.hidden_backward(2 * i, g, tape, &mut grads)?;
            if i > 0 {
                g = maxpool2x2_backward(&tape.pools[i - 1], &g)?;
            }
        }
        grads.input = g;
        Ok(grads)
    }

    /// Forward, cross-entropy, backward, Adam. Returns the loss before the
    /// update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        targets: &[u8],
        adam: &mut AdamState<T>,
        rng: &mut R,
    ) -> Result<f64> {
        let options = ForwardOptions {
            edge_drop: None,
            training: true,
        };
        self.train_step_with(batch, targets, adam, rng, &options)
    }

    pub fn train_step_with<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        targets: &[u8],
        adam: &mut AdamState<T>,
        rng: &mut R,
        options: &ForwardOptions,
    ) -> Result<f64> {
        let (logits, tape) = self.forward_with(batch, rng, options)?;
        let ce = softmax_cross_entropy_pixelwise(&logits, targets)?;
        drop(logits);
        let grads = self.backward(&tape, &ce.grad)?;
        drop(tape);
        let flat = grads.flat();
        adam_step(&mut self.params_mut(), &flat, adam)?;
        Ok(ce.loss)
    }

    /// Mean per-pixel cross-entropy of each batch item, without gradients.
    pub fn item_losses<R: Rng + ?Sized>(&self, batch: &Tensor<T>, targets: &[u8], rng: &mut R) -> Result<Vec<f64>> {
        let (logits, _) = self.forward(batch, rng)?;
        Ok(softmax_cross_entropy_pixelwise(&logits, targets)?.per_item)
    }
}
