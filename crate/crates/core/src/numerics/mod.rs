//! Dense arrays, static computation graphs with vector-Jacobian products,
//! parameter containers and a finite-difference oracle.

mod array;
mod graph;
mod params;

use rand::Rng;
use thiserror::Error;

pub use array::{max_relative_error, relative_error, Array};
pub use graph::{
    backward_pass_count, evaluate, forward_pass_count, grad_enabled, no_grad, vjp, Bindings,
    Forward, Graph, GraphBuilder, NodeId, Op,
};
pub use params::{Gradients, ParameterSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("unknown output `{0}`")]
    UnknownOutput(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("differentiation is disabled on this thread")]
    GradDisabled,
    #[error("non-finite function value at coordinate {index}")]
    NonFiniteCoordinate { index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Box-Muller draw from the standard normal.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Central-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_difference<E>(
    mut f: impl FnMut(&Array) -> Result<f64, E>,
    at: &Array,
    h: f64,
) -> Result<Array, NumericsError>
where
    E: std::fmt::Display,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = at.clone();
    let mut probe = at.clone();
    for i in 0..at.len() {
        let x = at.data()[i];
        probe.data_mut()[i] = x + h;
        let plus = f(&probe).map_err(|_| NumericsError::NonFiniteCoordinate { index: i })?;
        probe.data_mut()[i] = x - h;
        let minus = f(&probe).map_err(|_| NumericsError::NonFiniteCoordinate { index: i })?;
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFiniteCoordinate { index: i });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}
