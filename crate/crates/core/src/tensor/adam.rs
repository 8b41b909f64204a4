use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::{Error, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one buffer per parameter array.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_lens: impl IntoIterator<Item = usize>, config: AdamConfig) -> Self {
        let lens: Vec<usize> = param_lens.into_iter().collect();
        AdamState {
            step_count: 0,
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            config,
        }
    }
}

/// One bias-corrected Adam update of every parameter array.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} parameter arrays, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape(format!(
                "adam: parameter {i} has {} values, gradient {}, moments {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let step = T::of(c.lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(c.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
