use rand::Rng;
use serde::Serialize;

use super::{Precision, Scalar, Tensor};
use crate::rng::stream;

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<40} max_rel_error={:.3e} (tol {:.0e}, {} coords)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.checked
        )
    }
}

fn step_for(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-5,
        Precision::F32 => 1e-2,
    }
}

/// Magnitude below which errors are measured absolutely rather than
/// relatively; keeps round-off on near-zero entries from dominating.
fn floor_for(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-5,
        Precision::F32 => 1e-2,
    }
}

/// Compares `analytic` (the claimed gradient of `f` at `x`) against central
/// differences, on `indices` or on every coordinate.
///
/// A coordinate that misses the tolerance is measured again with steps 10x
/// and 100x smaller and its smallest error is kept: a ReLU or max-pool kink
/// within one step of `x` passes, a wrong gradient fails at every step.
pub fn gradcheck_scalar<T: Scalar>(
    name: &str,
    x: &[T],
    mut f: impl FnMut(&[T]) -> f64,
    analytic: &[T],
    indices: Option<&[usize]>,
    tolerance: f64,
) -> GradcheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let h = step_for(T::PRECISION);
    let floor = floor_for(T::PRECISION);
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = 0;
    for &i in idx {
        let orig = probe[i];
        let a = analytic[i].as_f64();
        let mut rel = f64::INFINITY;
        for step in [h, h / 10.0, h / 100.0] {
            probe[i] = T::of(orig.as_f64() + step);
            let up = f(&probe);
            probe[i] = T::of(orig.as_f64() - step);
            let down = f(&probe);
            probe[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            rel = rel.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            if rel < tolerance {
                break;
            }
        }
        if !(rel <= max_rel) {
            max_rel = rel;
            worst = i;
        }
    }
    GradcheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        worst_index: worst,
        checked: idx.len(),
        tolerance,
        pass: max_rel < tolerance,
    }
}

/// Checks a tensor operation's backward pass.
///
/// The operation is reduced to the scalar `<u, forward(x)>` for a random
/// upstream `u` (entries of magnitude in `[0.5, 1.5]`), whose gradient is
/// `backward(x, u)`.
pub fn gradcheck<T: Scalar>(
    name: &str,
    input: &Tensor<T>,
    mut forward: impl FnMut(&Tensor<T>) -> Tensor<T>,
    mut backward: impl FnMut(&Tensor<T>, &Tensor<T>) -> Tensor<T>,
    tolerance: f64,
    seed: u64,
) -> GradcheckReport {
    let y = forward(input);
    let mut rng = stream(seed);
    let u: Vec<f64> = (0..y.len())
        .map(|_| {
            let m = 0.5 + rng.gen::<f64>();
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let upstream = Tensor::<T>::from_f64(y.shape(), &u).expect("upstream matches output");
    let analytic = backward(input, &upstream);
    assert_eq!(analytic.shape(), input.shape(), "backward returned wrong shape");
    let shape = input.shape();
    gradcheck_scalar(
        name,
        input.data(),
        |x| {
            let t = Tensor::from_vec(shape, x.to_vec()).expect("same shape");
            forward(&t)
                .data()
                .iter()
                .zip(&u)
                .map(|(a, b)| a.as_f64() * b)
                .sum()
        },
        analytic.data(),
        None,
        tolerance,
    )
}
