//! Random linear contractions with exact solutions, for comparing the
//! solvers against a direct linear solve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mat_vec, norm2, solve, SolveConfig, SolveError, SolverKind};
use crate::numerics::{standard_normal, Array, NumericsError};

/// Random `A` with spectral norm `rho` and random `b`. Symmetric matrices are
/// built as `Q·diag(λ)·Qᵀ` so the norm is exact.
pub fn contraction(n: usize, rho: f64, symmetric: bool, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a: Vec<f64> = (0..n * n).map(|_| standard_normal(&mut rng)).collect();
    if symmetric {
        let q = orthonormal_rows(&a, n);
        let mut lambda: Vec<f64> = (0..n).map(|_| rho * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        lambda[0] = if rng.gen::<bool>() { rho } else { -rho };
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| q[k][i] * lambda[k] * q[k][j]).sum();
            }
        }
    } else {
        let s = spectral_norm(&a, n);
        for v in &mut a {
            *v *= rho / s;
        }
    }
    let b = (0..n).map(|_| standard_normal(&mut rng)).collect();
    (a, b)
}

fn orthonormal_rows(a: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut v = a[i * n..(i + 1) * n].to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let s = norm2(&v);
        q.push(v.iter().map(|x| x / s).collect());
    }
    q
}

fn spectral_norm(a: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0; n];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let av = mat_vec(a, &v);
        let mut atav = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                atav[j] += a[i * n + j] * av[i];
            }
        }
        let nv = norm2(&atav);
        sigma = nv.sqrt();
        v = atav.iter().map(|x| x / nv).collect();
    }
    sigma
}

/// Solves `(I − A) x = b` by Gaussian elimination with partial pivoting.
pub fn direct_solve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n)
                .map(|j| (if i == j { 1.0 } else { 0.0 }) - a[i * n + j])
                .collect();
            row.push(b[i]);
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x
}

pub fn affine(a: Vec<f64>, b: Vec<f64>) -> impl FnMut(&Array) -> Result<Array, NumericsError> {
    move |x: &Array| {
        let mut y = mat_vec(&a, x.data());
        for (yi, bi) in y.iter_mut().zip(&b) {
            *yi += bi;
        }
        Ok(Array::vector(y))
    }
}

/// One benchmark instance: `x = A·x + b` with `‖A‖₂ = rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub instance: usize,
    pub dim: usize,
    pub rho: f64,
    /// Per solver in [`SolverKind::ALL`] order.
    pub iterations: Vec<usize>,
    /// Max absolute deviation from the direct solve, per solver.
    pub max_error: Vec<f64>,
    pub converged: Vec<bool>,
}

/// `count` instances with dimension in `2..=max_dim` and contraction factor
/// in `[0.1, 0.9)`, all solved from zero.
pub fn bench_contractions(count: usize, max_dim: usize, seed: u64, cfg: &SolveConfig) -> Result<Vec<BenchRow>, SolveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(count);
    for instance in 0..count {
        let n = rng.gen_range(2..=max_dim.max(2));
        let rho = rng.gen_range(0.1..0.9);
        let (a, b) = contraction(n, rho, false, seed.wrapping_mul(1000).wrapping_add(instance as u64));
        let exact = direct_solve(&a, &b);
        let mut row = BenchRow {
            instance,
            dim: n,
            rho,
            iterations: vec![],
            max_error: vec![],
            converged: vec![],
        };
        for kind in SolverKind::ALL {
            let r = solve(kind, affine(a.clone(), b.clone()), &Array::zeros(&[n]), cfg)?;
            let err = r.state.data().iter().zip(&exact).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            row.iterations.push(r.iterations);
            row.max_error.push(err);
            row.converged.push(r.converged);
        }
        rows.push(row);
    }
    Ok(rows)
}
