//! Root solvers for `x* = f(x*)` over continuous states and fixed-point or
//! cycle detection over discrete token sequences.
//!
//! Every solver counts one iteration per evaluation of `f`, measures the
//! residual `‖f(x) − x‖₂` over the flattened state, and returns the last
//! evaluated point together with its residual.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Array, NumericsError};

pub mod bench;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("non-finite state at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("state dimension {dim} exceeds the Broyden cap {cap}")]
    DimensionTooLarge { dim: usize, cap: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("map evaluation failed at iteration {iteration}: {source}")]
    Map {
        iteration: usize,
        #[source]
        source: NumericsError,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub anderson_memory: usize,
    pub damping: f64,
    pub broyden_dim_cap: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
            anderson_memory: 5,
            damping: 1.0,
            broyden_dim_cap: 4096,
        }
    }
}

impl SolveConfig {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.tolerance > 0.0) {
            return Err(SolveError::InvalidConfig("tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(SolveError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if self.anderson_memory == 0 {
            return Err(SolveError::InvalidConfig("anderson_memory must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(SolveError::InvalidConfig("damping must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub state: Array,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trajectory_norms: Vec<f64>,
    /// Steps where the accelerated update was replaced by a plain step.
    pub fallbacks: usize,
}

struct Tracker<'a, F> {
    f: F,
    cfg: &'a SolveConfig,
    norms: Vec<f64>,
}

impl<F> Tracker<'_, F>
where
    F: FnMut(&Array) -> Result<Array, NumericsError>,
{
    /// Evaluates `f(x)` and returns `(f(x), f(x) − x, ‖f(x) − x‖)`.
    fn eval(&mut self, x: &Array) -> Result<(Array, Array, f64), SolveError> {
        let iteration = self.norms.len() + 1;
        let fx = (self.f)(x).map_err(|source| match source {
            NumericsError::NonFinite { .. } => SolveError::NonFinite { iteration },
            source => SolveError::Map { iteration, source },
        })?;
        if !fx.is_finite() {
            return Err(SolveError::NonFinite { iteration });
        }
        let r = fx.sub(x);
        let norm = r.norm();
        self.norms.push(norm);
        Ok((fx, r, norm))
    }

    fn iterations(&self) -> usize {
        self.norms.len()
    }

    fn done(&self, norm: f64) -> bool {
        norm <= self.cfg.tolerance
    }

    fn exhausted(&self) -> bool {
        self.norms.len() >= self.cfg.max_iterations
    }

    fn finish(self, state: Array, residual: f64, fallbacks: usize) -> SolveResult {
        SolveResult {
            converged: residual <= self.cfg.tolerance,
            iterations: self.norms.len(),
            state,
            residual,
            trajectory_norms: self.norms,
            fallbacks,
        }
    }
}

fn check_finite(x: &Array, iteration: usize) -> Result<(), SolveError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(SolveError::NonFinite { iteration })
    }
}

fn damped_step(x: &Array, fx: &Array, beta: f64) -> Array {
    if beta == 1.0 {
        fx.clone()
    } else {
        x.zip_map(fx, |a, b| (1.0 - beta) * a + beta * b)
    }
}

/// Damped fixed-point iteration `x ← (1−β)x + βf(x)`.
pub fn solve_plain<F>(f: F, x0: &Array, cfg: &SolveConfig) -> Result<SolveResult, SolveError>
where
    F: FnMut(&Array) -> Result<Array, NumericsError>,
{
    cfg.validate()?;
    let mut t = Tracker {
        f,
        cfg,
        norms: Vec::new(),
    };
    let mut x = x0.clone();
    loop {
        let (fx, _, norm) = t.eval(&x)?;
        if t.done(norm) || t.exhausted() {
            return Ok(t.finish(x, norm, 0));
        }
        x = damped_step(&x, &fx, cfg.damping);
        check_finite(&x, t.iterations())?;
    }
}

/// Ridge added to the Anderson normal equations, relative to their largest
/// diagonal entry.
const ANDERSON_RIDGE: f64 = 1e-10;

/// Anderson mixing over the last `m` residual differences.
pub fn solve_anderson<F>(f: F, x0: &Array, cfg: &SolveConfig) -> Result<SolveResult, SolveError>
where
    F: FnMut(&Array) -> Result<Array, NumericsError>,
{
    cfg.validate()?;
    let mut t = Tracker {
        f,
        cfg,
        norms: Vec::new(),
    };
    let m = cfg.anderson_memory;
    let beta = cfg.damping;
    let mut xs: Vec<Array> = Vec::new();
    let mut gs: Vec<Array> = Vec::new();
    let mut rs: Vec<Array> = Vec::new();
    let mut fallbacks = 0;
    let mut x = x0.clone();
    loop {
        let (g, r, norm) = t.eval(&x)?;
        if t.done(norm) || t.exhausted() {
            return Ok(t.finish(x, norm, fallbacks));
        }
        xs.push(x.clone());
        gs.push(g.clone());
        rs.push(r.clone());
        if xs.len() > m + 1 {
            xs.remove(0);
            gs.remove(0);
            rs.remove(0);
        }
        let cols = xs.len() - 1;
        let next = if cols == 0 {
            damped_step(&x, &g, beta)
        } else {
            let df: Vec<Array> = (0..cols).map(|i| rs[i + 1].sub(&rs[i])).collect();
            match least_squares(&df, &r) {
                Some(gamma) => {
                    let mut x_bar = x.clone();
                    let mut r_bar = r.clone();
                    for (i, &gi) in gamma.iter().enumerate() {
                        x_bar.axpy(-gi, &xs[i + 1].sub(&xs[i]));
                        r_bar.axpy(-gi, &df[i]);
                    }
                    x_bar.axpy(beta, &r_bar);
                    x_bar
                }
                None => {
                    fallbacks += 1;
                    damped_step(&x, &g, beta)
                }
            }
        };
        check_finite(&next, t.iterations())?;
        x = next;
    }
}

/// Solves `min ‖r − Σ γᵢ colᵢ‖` through ridge-regularized normal equations.
/// Returns `None` when the system is numerically rank-deficient.
fn least_squares(cols: &[Array], r: &Array) -> Option<Vec<f64>> {
    let n = cols.len();
    let mut a = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        for j in 0..=i {
            let v = cols[i].dot(&cols[j]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
        rhs[i] = cols[i].dot(r);
    }
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    for i in 0..n {
        a[i * n + i] += ANDERSON_RIDGE * max_diag;
    }
    // Cholesky factorization in place (lower triangle).
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-12 * max_diag) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut y = rhs;
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    y.iter().all(|v| v.is_finite()).then_some(y)
}

/// Good-Broyden iteration on `g(x) = f(x) − x`, maintaining a dense inverse
/// Jacobian estimate that starts from `−I`.
pub fn solve_broyden<F>(f: F, x0: &Array, cfg: &SolveConfig) -> Result<SolveResult, SolveError>
where
    F: FnMut(&Array) -> Result<Array, NumericsError>,
{
    cfg.validate()?;
    let n = x0.len();
    if n > cfg.broyden_dim_cap {
        return Err(SolveError::DimensionTooLarge {
            dim: n,
            cap: cfg.broyden_dim_cap,
        });
    }
    let mut t = Tracker {
        f,
        cfg,
        norms: Vec::new(),
    };
    let mut h = negative_identity(n);
    let mut fallbacks = 0;
    let mut x = x0.clone();
    let (_, mut g, mut norm) = t.eval(&x)?;
    loop {
        if t.done(norm) || t.exhausted() {
            return Ok(t.finish(x, norm, fallbacks));
        }
        // dx = −H g; with H = −I this is the damped plain step.
        let mut dx = mat_vec(&h, g.data());
        for v in &mut dx {
            *v = -*v;
        }
        if is_negative_identity(&h) {
            for v in &mut dx {
                *v *= cfg.damping;
            }
        }
        let mut x_new = x.clone();
        for (xi, di) in x_new.data_mut().iter_mut().zip(&dx) {
            *xi += di;
        }
        check_finite(&x_new, t.iterations())?;
        let (_, g_new, norm_new) = t.eval(&x_new)?;
        let dg: Vec<f64> = g_new.data().iter().zip(g.data()).map(|(a, b)| a - b).collect();
        let h_dg = mat_vec(&h, &dg);
        let denom: f64 = dx.iter().zip(&h_dg).map(|(a, b)| a * b).sum();
        let scale = norm2(&dx) * norm2(&h_dg);
        if denom.abs() < 1e-12 * scale.max(f64::MIN_POSITIVE) || !denom.is_finite() {
            fallbacks += 1;
            h = negative_identity(n);
        } else {
            // H ← H + (dx − H·dg)(dxᵀH) / (dxᵀH·dg)
            let dxt_h = vec_mat(&dx, &h);
            let u: Vec<f64> = dx.iter().zip(&h_dg).map(|(a, b)| (a - b) / denom).collect();
            for i in 0..n {
                let ui = u[i];
                if ui == 0.0 {
                    continue;
                }
                let row = &mut h[i * n..(i + 1) * n];
                for (hij, vj) in row.iter_mut().zip(&dxt_h) {
                    *hij += ui * vj;
                }
            }
        }
        x = x_new;
        g = g_new;
        norm = norm_new;
    }
}

fn negative_identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = -1.0;
    }
    h
}

fn is_negative_identity(h: &[f64]) -> bool {
    let n = (h.len() as f64).sqrt() as usize;
    (0..n).all(|i| (0..n).all(|j| h[i * n + j] == if i == j { -1.0 } else { 0.0 }))
}

fn mat_vec(h: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| h[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn vec_mat(v: &[f64], h: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, hij) in out.iter_mut().zip(&h[i * n..(i + 1) * n]) {
            *o += vi * hij;
        }
    }
    out
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Plain,
    #[default]
    Anderson,
    Broyden,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Plain, SolverKind::Anderson, SolverKind::Broyden];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Plain => "plain",
            SolverKind::Anderson => "anderson",
            SolverKind::Broyden => "broyden",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = SolveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SolveError::InvalidConfig(format!("unknown solver `{s}`")))
    }
}

pub fn solve<F>(kind: SolverKind, f: F, x0: &Array, cfg: &SolveConfig) -> Result<SolveResult, SolveError>
where
    F: FnMut(&Array) -> Result<Array, NumericsError>,
{
    match kind {
        SolverKind::Plain => solve_plain(f, x0, cfg),
        SolverKind::Anderson => solve_anderson(f, x0, cfg),
        SolverKind::Broyden => solve_broyden(f, x0, cfg),
    }
}

/// Outcome of checking the newest entry of a sequence history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceStatus {
    /// The newest sequence equals its predecessor.
    Converged,
    /// The newest sequence equals the one `p` steps back (`p > 1`).
    Cycle(usize),
    Continue,
}

impl SequenceStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, SequenceStatus::Continue)
    }
}

pub const DEFAULT_MAX_CYCLE: usize = 4;

/// Exact token-level fixed-point and short-cycle detection.
pub fn detect_sequence_fixed_point<S, T>(history: &[S], max_cycle: usize) -> SequenceStatus
where
    S: AsRef<[T]>,
    T: PartialEq,
{
    let Some(newest) = history.last() else {
        return SequenceStatus::Continue;
    };
    let newest = newest.as_ref();
    let len = history.len();
    for p in 1..=max_cycle.max(1) {
        if len > p && history[len - 1 - p].as_ref() == newest {
            return if p == 1 {
                SequenceStatus::Converged
            } else {
                SequenceStatus::Cycle(p)
            };
        }
    }
    SequenceStatus::Continue
}
