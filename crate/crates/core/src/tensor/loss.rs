use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Result of [`softmax_cross_entropy_pixelwise`].
#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    /// Mean over all `n * h * w` pixels.
    pub loss: f64,
    /// Mean over the pixels of each batch item.
    pub per_item: Vec<f64>,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor<T>,
}

/// Pixel-wise softmax cross-entropy against a class-index map laid out as
/// `(n, h, w)`.
pub fn softmax_cross_entropy_pixelwise<T: Scalar>(
    logits: &Tensor<T>,
    target: &[u8],
) -> Result<CrossEntropy<T>> {
    let s = logits.shape();
    let (k, plane) = (s.c, s.plane());
    if target.len() != s.n * plane {
        return Err(Error::shape(format!(
            "target has {} pixels, logits {s} need {}",
            target.len(),
            s.n * plane
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(format!(
            "class index {bad} out of range for {k} classes"
        )));
    }
    let total = (s.n * plane) as f64;
    let scale = 1.0 / total;
    // Entries below `tiny` would turn subnormal downstream and are flushed.
    let tiny = (T::min_positive_value() / T::epsilon()).as_f64();
    let mut grad = Tensor::zeros(s);
    let mut per_item = Vec::with_capacity(s.n);
    let mut probs = vec![0.0f64; k];
    for n in 0..s.n {
        let item = logits.item(n);
        let g = &mut grad.data_mut()[n * s.item()..(n + 1) * s.item()];
        let mut item_loss = 0.0;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(item[c * plane + p].as_f64());
            }
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (item[c * plane + p].as_f64() - max).exp();
                z += *pr;
            }
            let t = target[n * plane + p] as usize;
            item_loss += z.ln() - (item[t * plane + p].as_f64() - max);
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == t { 1.0 } else { 0.0 };
                let v = (pr / z - onehot) * scale;
                g[c * plane + p] = if v.abs() < tiny { T::zero() } else { T::of(v) };
            }
        }
        per_item.push(item_loss / plane as f64);
    }
    let loss = per_item.iter().sum::<f64>() / s.n as f64;
    Ok(CrossEntropy { loss, per_item, grad })
}
