//! Dense numerical kernel: matrices, the one-hidden-layer MLP used for every
//! attention map, Adam, finite differences and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_grad, max_relative_error, FiniteDiff};
pub use matrix::{axpy, dot, Matrix};
pub use mlp::{ForwardCache, MlpGrads, MlpParams, Mode, NormMode};

/// `log Σ exp(xs)` with max-subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
