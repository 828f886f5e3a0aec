//! Finite-difference verification of the implicit gradient on the three
//! reference map families.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    grad_ift, solve_equilibrium, AttentionBlock, DifferentiableMap, EqGradError, LinearContraction, LossFn,
    ScalarAffine, SquaredError, DEFAULT_NEUMANN_TERMS,
};
use crate::fixedpoint::{SolveConfig, SolverKind};
use crate::numerics::{max_relative_error, standard_normal, Array, Gradients, ParameterSet};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFamily {
    /// `f(x, c) = θx + c` with `|θ| ≤ 0.8`.
    Scalar,
    /// 8-dim linear map with spectral norm 0.5.
    Linear,
    /// One attention block over a 3×4 state with output scale 0.5.
    Attention,
}

impl MapFamily {
    pub const ALL: [MapFamily; 3] = [MapFamily::Scalar, MapFamily::Linear, MapFamily::Attention];

    pub fn name(self) -> &'static str {
        match self {
            MapFamily::Scalar => "scalar",
            MapFamily::Linear => "linear",
            MapFamily::Attention => "attention",
        }
    }
}

impl std::str::FromStr for MapFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MapFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown map family `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub family: MapFamily,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn tight() -> SolveConfig {
    SolveConfig {
        tolerance: 1e-13,
        max_iterations: 5000,
        ..SolveConfig::default()
    }
}

/// Central differences of `θ ↦ L(x*(θ), y)`, re-solving from `x0` for every
/// probe.
pub fn fd_through_solve<M: DifferentiableMap + ?Sized, L: LossFn + ?Sized>(
    map: &M,
    loss: &L,
    x0: &Array,
    c: &Array,
    params: &ParameterSet,
    y: &Array,
) -> Result<Gradients, EqGradError> {
    let mut out = Gradients::new();
    for (name, value) in params.iter() {
        let mut g = value.map(|_| 0.0);
        for i in 0..value.len() {
            let eval = |delta: f64| -> Result<f64, EqGradError> {
                let mut p = params.clone();
                p.values_mut(name).expect("own name")[i] += delta;
                let r = solve_equilibrium(map, SolverKind::Anderson, x0, c, &p, &tight())?;
                Ok(loss.value(&r.state, y))
            };
            g.data_mut()[i] = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        }
        out.insert(name.to_string(), g);
    }
    Ok(out)
}

/// A map instance with its context, target and start state.
pub struct Instance {
    pub map: Box<dyn DifferentiableMap>,
    pub params: ParameterSet,
    pub x0: Array,
    pub c: Array,
    pub y: Array,
}

pub fn instance(family: MapFamily, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normals = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| scale * standard_normal(&mut rng)).collect() };
    match family {
        MapFamily::Scalar => {
            let theta = ChaCha8Rng::seed_from_u64(seed ^ 0x7E7A).gen_range(-0.8..0.8);
            Instance {
                map: Box::new(ScalarAffine),
                params: ScalarAffine::params(theta),
                x0: Array::vector(vec![0.0]),
                c: Array::vector(normals(1, 1.0)),
                y: Array::vector(normals(1, 1.0)),
            }
        }
        MapFamily::Linear => {
            let map = LinearContraction { dim: 8, context_dim: 3 };
            let params = map.random_params(0.5, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x11));
            Instance {
                map: Box::new(map),
                params,
                x0: Array::zeros(&[8]),
                c: Array::vector(normals(3, 1.0)),
                y: Array::vector(normals(8, 1.0)),
            }
        }
        MapFamily::Attention => {
            let map = AttentionBlock {
                seq: 3,
                dim: 4,
                output_scale: 0.5,
            };
            let params = map.random_params(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x22));
            Instance {
                map: Box::new(map),
                params,
                x0: Array::zeros(&[3, 4]),
                c: Array::matrix(3, 4, normals(12, 1.0)).expect("shape"),
                y: Array::matrix(3, 4, normals(12, 0.3)).expect("shape"),
            }
        }
    }
}

/// Compares the implicit gradient with finite differences through the
/// solver. The Neumann series runs to its early stop.
pub fn gradcheck(family: MapFamily, seed: u64) -> Result<GradcheckRow, EqGradError> {
    let inst = instance(family, seed);
    let map = inst.map.as_ref();
    let solved = solve_equilibrium(map, SolverKind::Anderson, &inst.x0, &inst.c, &inst.params, &tight())?;
    let terms = DEFAULT_NEUMANN_TERMS.max(200);
    let g = grad_ift(map, &SquaredError, &solved.state, &inst.c, &inst.params, &inst.y, terms)?;
    let fd = fd_through_solve(map, &SquaredError, &inst.x0, &inst.c, &inst.params, &inst.y)?;
    let max_rel_error = g
        .iter()
        .map(|(name, a)| max_relative_error(a, &fd[name], 1e-8))
        .fold(0.0, f64::max);
    Ok(GradcheckRow {
        family,
        seed,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOLERANCE,
    })
}
