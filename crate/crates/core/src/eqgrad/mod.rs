//! Gradients of a loss evaluated at the equilibrium `x* = f_θ(x*, c)`.
//!
//! Three estimators share one map abstraction:
//! - [`grad_ift`] sums the Neumann series `g·Σ Jᵏ` with `J = ∂f/∂x` at `x*`
//!   and maps the result through `∂f/∂θ`;
//! - [`grad_jacobian_free`] keeps only the `k = 0` term;
//! - [`grad_unrolled`] backpropagates through `K` explicit applications of
//!   `f` and serves as a verification oracle.
//!
//! Forward solves run under [`no_grad`], so no estimator differentiates
//! through solver iterations.

pub mod gradcheck;
mod maps;
mod optim;

use thiserror::Error;

use crate::fixedpoint::{self, SolveConfig, SolveError, SolveResult, SolverKind};
use crate::numerics::{
    no_grad, Array, Bindings, Gradients, Graph, GraphBuilder, NodeId, NumericsError,
    ParameterSet,
};

pub use maps::{AttentionBlock, LinearContraction, ScalarAffine, SquaredError};
pub use optim::{global_norm, Adam, AdamConfig, Optimizer, Sgd};

pub const STATE_INPUT: &str = "x";
pub const CONTEXT_INPUT: &str = "c";
const OUTPUT: &str = "f";

pub const DEFAULT_NEUMANN_TERMS: usize = 30;
pub const NEUMANN_EARLY_STOP: f64 = 1e-12;
pub const UNROLL_CAP: usize = 200;

#[derive(Debug, Error)]
pub enum EqGradError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("non-finite value in Neumann term {term}")]
    NonFinite { term: usize },
    #[error("unrolling {steps} steps exceeds the cap of {cap}")]
    TooManySteps { steps: usize, cap: usize },
    #[error("unrolling needs at least one step")]
    NoSteps,
    #[error("map output shape {output:?} differs from state shape {state:?}")]
    StateShape { state: Vec<usize>, output: Vec<usize> },
}

/// A map `f_θ(x, c)` expressed as graph construction. Parameters are graph
/// inputs named after their entries in the [`ParameterSet`].
pub trait DifferentiableMap {
    fn build(
        &self,
        b: &mut GraphBuilder,
        x: NodeId,
        c: NodeId,
        params: &ParameterSet,
    ) -> Result<NodeId, NumericsError>;

    fn forward(&self, x: &Array, c: &Array, params: &ParameterSet) -> Result<Array, EqGradError> {
        CompiledMap::new(self, x.shape(), c.shape(), params)?.forward(x, c, params)
    }

    /// `vᵀ·∂f/∂x`.
    fn vjp_x(
        &self,
        x: &Array,
        c: &Array,
        params: &ParameterSet,
        v: &Array,
    ) -> Result<Array, EqGradError> {
        CompiledMap::new(self, x.shape(), c.shape(), params)?.vjp_x(x, c, params, v)
    }

    /// `vᵀ·∂f/∂θ` for every parameter.
    fn vjp_theta(
        &self,
        x: &Array,
        c: &Array,
        params: &ParameterSet,
        v: &Array,
    ) -> Result<Gradients, EqGradError> {
        CompiledMap::new(self, x.shape(), c.shape(), params)?.vjp_theta(x, c, params, v)
    }
}

/// Differentiable scalar loss `L(x, y)`.
pub trait LossFn {
    fn value(&self, x: &Array, y: &Array) -> f64;
    fn grad_x(&self, x: &Array, y: &Array) -> Array;
    /// Adds the loss to a graph as a node whose entries sum to `L(x, y)`.
    fn build(&self, b: &mut GraphBuilder, x: NodeId, y: &Array) -> Result<NodeId, NumericsError>;
}

/// A map lowered to a single graph for fixed state and context shapes.
#[derive(Debug, Clone)]
pub struct CompiledMap {
    graph: Graph,
    state_shape: Vec<usize>,
    param_names: Vec<String>,
}

impl CompiledMap {
    pub fn new<M: DifferentiableMap + ?Sized>(
        map: &M,
        state_shape: &[usize],
        context_shape: &[usize],
        params: &ParameterSet,
    ) -> Result<Self, EqGradError> {
        let mut b = GraphBuilder::new();
        let x = b.input(STATE_INPUT, state_shape)?;
        let c = b.input(CONTEXT_INPUT, context_shape)?;
        let out = map.build(&mut b, x, c, params)?;
        if b.shape(out) != state_shape {
            return Err(EqGradError::StateShape {
                state: state_shape.to_vec(),
                output: b.shape(out).to_vec(),
            });
        }
        b.output(OUTPUT, out);
        Ok(Self {
            graph: b.finish(),
            state_shape: state_shape.to_vec(),
            param_names: params.names().map(str::to_string).collect(),
        })
    }

    pub fn state_shape(&self) -> &[usize] {
        &self.state_shape
    }

    fn bindings<'a>(x: &'a Array, c: &'a Array, params: &'a ParameterSet) -> Bindings<'a> {
        let mut bindings = Bindings::new();
        bindings.bind_params(params);
        bindings.bind(STATE_INPUT, x).bind(CONTEXT_INPUT, c);
        bindings
    }

    pub fn forward(&self, x: &Array, c: &Array, params: &ParameterSet) -> Result<Array, EqGradError> {
        let bindings = Self::bindings(x, c, params);
        Ok(self.graph.forward(&bindings)?.output(OUTPUT)?.clone())
    }

    pub fn vjp_x(
        &self,
        x: &Array,
        c: &Array,
        params: &ParameterSet,
        v: &Array,
    ) -> Result<Array, EqGradError> {
        let bindings = Self::bindings(x, c, params);
        let mut grads = self
            .graph
            .forward(&bindings)?
            .vjp(OUTPUT, v, &[STATE_INPUT])?;
        Ok(grads.remove(STATE_INPUT).expect("requested gradient"))
    }

    pub fn vjp_theta(
        &self,
        x: &Array,
        c: &Array,
        params: &ParameterSet,
        v: &Array,
    ) -> Result<Gradients, EqGradError> {
        let bindings = Self::bindings(x, c, params);
        let wrt: Vec<&str> = self.param_names.iter().map(String::as_str).collect();
        Ok(self.graph.forward(&bindings)?.vjp(OUTPUT, v, &wrt)?)
    }

    /// Solves `x = f(x)` from `x0` with differentiation disabled.
    pub fn solve(
        &self,
        kind: SolverKind,
        x0: &Array,
        c: &Array,
        params: &ParameterSet,
        cfg: &SolveConfig,
    ) -> Result<SolveResult, EqGradError> {
        no_grad(|| {
            let f = |x: &Array| {
                let bindings = Self::bindings(x, c, params);
                Ok(self.graph.forward(&bindings)?.output(OUTPUT)?.clone())
            };
            Ok(fixedpoint::solve(kind, f, x0, cfg)?)
        })
    }
}

/// Solves for the equilibrium of `map` without recording gradients.
pub fn solve_equilibrium<M: DifferentiableMap + ?Sized>(
    map: &M,
    kind: SolverKind,
    x0: &Array,
    c: &Array,
    params: &ParameterSet,
    cfg: &SolveConfig,
) -> Result<SolveResult, EqGradError> {
    CompiledMap::new(map, x0.shape(), c.shape(), params)?.solve(kind, x0, c, params, cfg)
}

/// Implicit-function gradient `g·(Σ_{k≤K} Jᵏ)·∂f/∂θ` with `g = ∂L/∂x*`.
/// The series stops early once a term's norm drops below 1e-12.
#[allow(clippy::too_many_arguments)]
pub fn grad_ift<M: DifferentiableMap + ?Sized, L: LossFn + ?Sized>(
    map: &M,
    loss: &L,
    x_star: &Array,
    c: &Array,
    params: &ParameterSet,
    y: &Array,
    neumann_terms: usize,
) -> Result<Gradients, EqGradError> {
    let compiled = CompiledMap::new(map, x_star.shape(), c.shape(), params)?;
    let g = loss.grad_x(x_star, y);
    if !g.is_finite() {
        return Err(EqGradError::NonFinite { term: 0 });
    }
    let mut v = g.clone();
    let mut term = g;
    for k in 1..=neumann_terms {
        term = compiled
            .vjp_x(x_star, c, params, &term)
            .map_err(|e| match e {
                EqGradError::Numerics(NumericsError::NonFinite { .. }) => {
                    EqGradError::NonFinite { term: k }
                }
                e => e,
            })?;
        v.axpy(1.0, &term);
        if !v.is_finite() {
            return Err(EqGradError::NonFinite { term: k });
        }
        if term.norm() < NEUMANN_EARLY_STOP {
            break;
        }
    }
    compiled.vjp_theta(x_star, c, params, &v)
}

/// `∂L/∂x*·∂f/∂θ`: one vector-Jacobian product through a single application
/// of the map at the equilibrium.
pub fn grad_jacobian_free<M: DifferentiableMap + ?Sized, L: LossFn + ?Sized>(
    map: &M,
    loss: &L,
    x_star: &Array,
    c: &Array,
    params: &ParameterSet,
    y: &Array,
) -> Result<Gradients, EqGradError> {
    grad_ift(map, loss, x_star, c, params, y, 0)
}

/// Backpropagation through `steps` explicit applications of the map,
/// starting from `x0`, with the loss applied to the last state.
pub fn grad_unrolled<M: DifferentiableMap + ?Sized, L: LossFn + ?Sized>(
    map: &M,
    loss: &L,
    x0: &Array,
    c: &Array,
    params: &ParameterSet,
    y: &Array,
    steps: usize,
) -> Result<Gradients, EqGradError> {
    if steps == 0 {
        return Err(EqGradError::NoSteps);
    }
    if steps > UNROLL_CAP {
        return Err(EqGradError::TooManySteps {
            steps,
            cap: UNROLL_CAP,
        });
    }
    let mut b = GraphBuilder::new();
    let x = b.input(STATE_INPUT, x0.shape())?;
    let c_node = b.input(CONTEXT_INPUT, c.shape())?;
    let mut state = x;
    for _ in 0..steps {
        state = map.build(&mut b, state, c_node, params)?;
    }
    b.output(OUTPUT, state);
    let graph = b.finish();
    let mut bindings = Bindings::new();
    bindings.bind_params(params);
    bindings.bind(STATE_INPUT, x0).bind(CONTEXT_INPUT, c);
    let forward = graph.forward(&bindings)?;
    let g = loss.grad_x(forward.output(OUTPUT)?, y);
    let wrt: Vec<&str> = params.names().collect();
    Ok(forward.vjp(OUTPUT, &g, &wrt)?)
}

/// Gradient of the one-step objective `L(f_θ(x*, c), y)` with `x*` held
/// constant, computed by building the loss into the graph.
pub fn grad_one_step<M: DifferentiableMap + ?Sized, L: LossFn + ?Sized>(
    map: &M,
    loss: &L,
    x_star: &Array,
    c: &Array,
    params: &ParameterSet,
    y: &Array,
) -> Result<(f64, Gradients), EqGradError> {
    let mut b = GraphBuilder::new();
    let x = b.input(STATE_INPUT, x_star.shape())?;
    let c_node = b.input(CONTEXT_INPUT, c.shape())?;
    let out = map.build(&mut b, x, c_node, params)?;
    let l = loss.build(&mut b, out, y)?;
    b.output("loss", l);
    let graph = b.finish();
    let mut bindings = Bindings::new();
    bindings.bind_params(params);
    bindings.bind(STATE_INPUT, x_star).bind(CONTEXT_INPUT, c);
    let forward = graph.forward(&bindings)?;
    let value = forward.output("loss")?;
    let total = value.data().iter().sum();
    let ones = value.map(|_| 1.0);
    let wrt: Vec<&str> = params.names().collect();
    Ok((total, forward.vjp("loss", &ones, &wrt)?))
}

/// Objective whose parameter gradient is taken with the equilibrium held
/// constant. Implemented for continuous maps here and for the refiner over
/// token sequences.
pub trait EquilibriumObjective {
    type State: ?Sized;
    type Context: ?Sized;
    type Target: ?Sized;

    /// `L(f_θ(x*, c), y)`.
    fn loss(
        &self,
        x_star: &Self::State,
        c: &Self::Context,
        y: &Self::Target,
        params: &ParameterSet,
    ) -> Result<f64, EqGradError>;

    /// The loss and its gradient in `θ` with `x*` constant.
    fn loss_and_gradient(
        &self,
        x_star: &Self::State,
        c: &Self::Context,
        y: &Self::Target,
        params: &ParameterSet,
    ) -> Result<(f64, Gradients), EqGradError>;
}

/// A continuous map paired with a loss.
pub struct MapObjective<'a, M: ?Sized, L: ?Sized> {
    pub map: &'a M,
    pub loss: &'a L,
}

impl<M: DifferentiableMap + ?Sized, L: LossFn + ?Sized> EquilibriumObjective
    for MapObjective<'_, M, L>
{
    type State = Array;
    type Context = Array;
    type Target = Array;

    fn loss(&self, x_star: &Array, c: &Array, y: &Array, params: &ParameterSet) -> Result<f64, EqGradError> {
        let out = self.map.forward(x_star, c, params)?;
        Ok(self.loss.value(&out, y))
    }

    fn loss_and_gradient(
        &self,
        x_star: &Array,
        c: &Array,
        y: &Array,
        params: &ParameterSet,
    ) -> Result<(f64, Gradients), EqGradError> {
        let compiled = CompiledMap::new(self.map, x_star.shape(), c.shape(), params)?;
        let out = compiled.forward(x_star, c, params)?;
        let value = self.loss.value(&out, y);
        let g = self.loss.grad_x(&out, y);
        Ok((value, compiled.vjp_theta(x_star, c, params, &g)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Loss before the update.
    pub loss_before: f64,
    /// Loss after the update; equals `loss_before` when the step was skipped.
    pub loss_after: f64,
    pub skipped: bool,
}

/// One optimizer update along the Jacobian-free gradient. A non-finite loss
/// or gradient leaves `params` untouched and marks the step as skipped.
pub fn equilibrium_training_step<O: EquilibriumObjective + ?Sized>(
    objective: &O,
    x_star: &O::State,
    c: &O::Context,
    y: &O::Target,
    params: &mut ParameterSet,
    optimizer: &mut dyn Optimizer,
) -> Result<StepReport, EqGradError> {
    let (loss_before, grads) = match objective.loss_and_gradient(x_star, c, y, params) {
        Ok(v) => v,
        Err(EqGradError::Numerics(NumericsError::NonFinite { .. })) => {
            return Ok(StepReport {
                loss_before: f64::NAN,
                loss_after: f64::NAN,
                skipped: true,
            })
        }
        Err(e) => return Err(e),
    };
    if !loss_before.is_finite() || !grads.values().all(Array::is_finite) {
        return Ok(StepReport {
            loss_before,
            loss_after: loss_before,
            skipped: true,
        });
    }
    optimizer.step(params, &grads)?;
    let loss_after = objective.loss(x_star, c, y, params)?;
    Ok(StepReport {
        loss_before,
        loss_after,
        skipped: false,
    })
}

#[cfg(test)]
mod tests;
