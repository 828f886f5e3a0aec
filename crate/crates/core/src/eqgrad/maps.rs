//! Contraction maps used to exercise the gradient estimators.

use rand::Rng;

use super::{DifferentiableMap, LossFn};
use crate::numerics::{standard_normal, Array, GraphBuilder, NodeId, NumericsError, ParameterSet};

/// `f(x, c) = θ·x + c` over states of shape `[n]`, with scalar `θ`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarAffine;

impl ScalarAffine {
    pub fn params(theta: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("theta", Array::vector(vec![theta])).expect("fresh set");
        p
    }
}

impl DifferentiableMap for ScalarAffine {
    fn build(
        &self,
        b: &mut GraphBuilder,
        x: NodeId,
        c: NodeId,
        _params: &ParameterSet,
    ) -> Result<NodeId, NumericsError> {
        let theta = b.input("theta", &[1])?;
        let tx = b.mul(x, theta)?;
        b.add(tx, c)
    }
}

/// `f(x, c) = x·W + c·U + b` with `‖W‖₂` set at initialization.
#[derive(Debug, Clone, Copy)]
pub struct LinearContraction {
    pub dim: usize,
    pub context_dim: usize,
}

impl LinearContraction {
    /// Random parameters with spectral norm of `W` equal to `rho`.
    pub fn random_params(&self, rho: f64, rng: &mut impl Rng) -> ParameterSet {
        let n = self.dim;
        let mut w: Vec<f64> = (0..n * n).map(|_| standard_normal(rng)).collect();
        let s = spectral_norm(&w, n);
        for v in &mut w {
            *v *= rho / s;
        }
        let mut p = ParameterSet::new();
        p.insert("W", Array::matrix(n, n, w).expect("square")).expect("fresh set");
        let m = self.context_dim;
        let u = (0..m * n).map(|_| standard_normal(rng) / (m as f64).sqrt()).collect();
        p.insert("U", Array::matrix(m, n, u).expect("shape")).expect("fresh set");
        let b = (0..n).map(|_| 0.1 * standard_normal(rng)).collect();
        p.insert("b", Array::vector(b)).expect("fresh set");
        p
    }
}

/// Largest singular value of a square row-major matrix by power iteration.
pub(crate) fn spectral_norm(a: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..1000 {
        let mut av = vec![0.0; n];
        for i in 0..n {
            av[i] = (0..n).map(|j| a[i * n + j] * v[j]).sum();
        }
        let mut atav = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                atav[j] += a[i * n + j] * av[i];
            }
        }
        let norm = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt();
        v = atav.iter().map(|x| x / norm).collect();
        if (next - sigma).abs() <= 1e-15 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

impl DifferentiableMap for LinearContraction {
    fn build(
        &self,
        b: &mut GraphBuilder,
        x: NodeId,
        c: NodeId,
        _params: &ParameterSet,
    ) -> Result<NodeId, NumericsError> {
        let w = b.input("W", &[self.dim, self.dim])?;
        let u = b.input("U", &[self.context_dim, self.dim])?;
        let bias = b.input("b", &[self.dim])?;
        let xw = b.matmul(x, w)?;
        let cu = b.matmul(c, u)?;
        let s = b.add(xw, cu)?;
        b.add(s, bias)
    }
}

/// One self-attention block over a `[seq, dim]` state:
/// `f(x, c) = scale·tanh(softmax(x·Wq·(x·Wk)ᵀ/√dim)·x·Wv·Wo + c)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub seq: usize,
    pub dim: usize,
    pub output_scale: f64,
}

impl AttentionBlock {
    pub fn random_params(&self, rng: &mut impl Rng) -> ParameterSet {
        let d = self.dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut p = ParameterSet::new();
        for name in ["Wq", "Wk", "Wv", "Wo"] {
            p.insert_normal(name, &[d, d], std, rng).expect("fresh set");
        }
        p
    }
}

impl DifferentiableMap for AttentionBlock {
    fn build(
        &self,
        b: &mut GraphBuilder,
        x: NodeId,
        c: NodeId,
        _params: &ParameterSet,
    ) -> Result<NodeId, NumericsError> {
        let d = self.dim;
        let wq = b.input("Wq", &[d, d])?;
        let wk = b.input("Wk", &[d, d])?;
        let wv = b.input("Wv", &[d, d])?;
        let wo = b.input("Wo", &[d, d])?;
        let q = b.matmul(x, wq)?;
        let k = b.matmul(x, wk)?;
        let v = b.matmul(x, wv)?;
        let scores = b.matmul_t(q, k)?;
        let scores = b.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = b.softmax(scores)?;
        let mixed = b.matmul(attn, v)?;
        let projected = b.matmul(mixed, wo)?;
        let h = b.add(projected, c)?;
        let t = b.tanh(h);
        b.scale(t, self.output_scale)
    }
}

/// `L(x, y) = ½‖x − y‖²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredError;

impl LossFn for SquaredError {
    fn value(&self, x: &Array, y: &Array) -> f64 {
        let d = x.sub(y);
        0.5 * d.dot(&d)
    }

    fn grad_x(&self, x: &Array, y: &Array) -> Array {
        x.sub(y)
    }

    fn build(&self, b: &mut GraphBuilder, x: NodeId, y: &Array) -> Result<NodeId, NumericsError> {
        let target = b.constant(y.clone());
        let d = b.sub(x, target)?;
        let sq = b.mul(d, d)?;
        let shape = b.shape(sq).to_vec();
        let summed = match shape.as_slice() {
            [n] => {
                let ones = b.constant(Array::full(&[*n, 1], 1.0));
                b.matmul(sq, ones)?
            }
            [rows, cols] => {
                let ones = b.constant(Array::full(&[*cols, 1], 1.0));
                let per_row = b.matmul(sq, ones)?;
                let ones_row = b.constant(Array::full(&[1, *rows], 1.0));
                b.matmul(ones_row, per_row)?
            }
            other => {
                return Err(NumericsError::InvalidShape(format!(
                    "squared error supports rank 1 or 2 states, got {other:?}"
                )))
            }
        };
        b.scale(summed, 0.5)
    }
}
