//! Minimal reverse-mode differentiation engine.
//!
//! Provides exactly the operations the spiking network graph needs: valid 1-D
//! convolution, width-2 max pooling, a dense projection, the leaky
//! integrate-and-fire step with a surrogate spike gradient, and a weighted
//! spike-count cross-entropy head. Operations record onto a [`Tape`]; calling
//! [`Tape::backward`] replays the tape in reverse and accumulates adjoints
//! into the gradient buffers of tensors flagged as requiring gradients.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, ADAM_EPS};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tape construction and the optimizer.
#[derive(Debug, Error)]
pub enum DiffError {
    /// An operand shape does not fit the operation; names the offending axis.
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    /// A parameter violates its domain constraint.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

/// Per-layer leaky integrate-and-fire constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    /// Membrane decay constant, in (0, 1).
    pub beta: f64,
    /// Firing threshold, > 0.
    pub theta: f64,
    /// Surrogate spike slope, > 0.
    pub sigma: f64,
}

impl LifParams {
    pub fn new(beta: f64, theta: f64, sigma: f64) -> Result<Self, DiffError> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(DiffError::InvalidParameter(format!(
                "decay beta must lie in (0, 1), got {beta}"
            )));
        }
        if !(theta > 0.0) {
            return Err(DiffError::InvalidParameter(format!(
                "threshold theta must be > 0, got {theta}"
            )));
        }
        if !(sigma > 0.0) {
            return Err(DiffError::InvalidParameter(format!(
                "spike slope sigma must be > 0, got {sigma}"
            )));
        }
        Ok(LifParams { beta, theta, sigma })
    }
}

/// How the spike nonlinearity is evaluated in the forward pass.
///
/// `Binary` is the real dynamics: a hard 0/1 threshold whose backward rule is
/// the fast-sigmoid surrogate. `Relaxed` replaces the hard threshold with the
/// surrogate's antiderivative, making the whole forward pass differentiable so
/// that analytic gradients can be checked against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    #[default]
    Binary,
    Relaxed,
}

/// Fast-sigmoid surrogate derivative `1 / (1 + sigma * |u - theta|)^2`,
/// evaluated elementwise at the membrane potentials.
pub fn surrogate_grad(u: &Tensor, p: &LifParams) -> Tensor {
    let data = u
        .data()
        .iter()
        .map(|&v| surrogate_grad_scalar(v, p.theta, p.sigma))
        .collect();
    Tensor::new(u.shape().to_vec(), data).expect("shape preserved")
}

#[inline]
pub(crate) fn surrogate_grad_scalar(u: f64, theta: f64, sigma: f64) -> f64 {
    let denom = 1.0 + sigma * (u - theta).abs();
    1.0 / (denom * denom)
}

/// Antiderivative of the surrogate, used as the relaxed spike output.
/// Equals 0.5 at threshold and has derivative exactly [`surrogate_grad_scalar`].
#[inline]
pub(crate) fn relaxed_spike_scalar(u: f64, theta: f64, sigma: f64) -> f64 {
    let z = u - theta;
    0.5 + z / (1.0 + sigma * z.abs())
}
