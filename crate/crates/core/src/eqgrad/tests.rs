use super::*;
use crate::numerics::{backward_pass_count, grad_enabled, relative_error, standard_normal};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tight() -> SolveConfig {
    SolveConfig {
        tolerance: 1e-13,
        max_iterations: 5000,
        ..SolveConfig::default()
    }
}

fn scalar_case() -> (ParameterSet, Array, Array, Array) {
    let params = ScalarAffine::params(0.5);
    let c = Array::vector(vec![1.0]);
    let y = Array::vector(vec![0.0]);
    let x_star = Array::vector(vec![2.0]);
    (params, c, y, x_star)
}

/// Central differences of `θ ↦ L(x*(θ), y)`, re-solving for every probe.
fn fd_through_solve<M: DifferentiableMap>(
    map: &M,
    x0: &Array,
    c: &Array,
    params: &ParameterSet,
    y: &Array,
) -> Gradients {
    let h = 1e-5;
    let mut out = Gradients::new();
    for (name, value) in params.iter() {
        let mut g = value.map(|_| 0.0);
        for i in 0..value.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.values_mut(name).unwrap()[i] += delta;
                let r = solve_equilibrium(map, SolverKind::Anderson, x0, c, &p, &tight()).unwrap();
                SquaredError.value(&r.state, y)
            };
            g.data_mut()[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        out.insert(name.to_string(), g);
    }
    out
}

fn assert_grads_close(actual: &Gradients, expected: &Gradients, tol: f64) {
    assert_eq!(actual.keys().collect::<Vec<_>>(), expected.keys().collect::<Vec<_>>());
    for (name, a) in actual {
        let e = &expected[name];
        let err = crate::numerics::max_relative_error(a, e, 1e-8);
        assert!(err < tol, "{name}: rel err {err}\nactual {a:?}\nexpected {e:?}");
    }
}

fn grad_distance(a: &Gradients, b: &Gradients) -> f64 {
    a.iter()
        .map(|(k, v)| {
            let d = v.sub(&b[k]);
            d.dot(&d)
        })
        .sum::<f64>()
        .sqrt()
}

#[test]
fn scalar_ift_gradient_is_eight() {
    let (params, c, y, x_star) = scalar_case();
    let g = grad_ift(&ScalarAffine, &SquaredError, &x_star, &c, &params, &y, DEFAULT_NEUMANN_TERMS)
        .unwrap();
    // The Neumann series truncated at 30 terms leaves 8·0.5³¹.
    assert!((g["theta"].item() - 8.0).abs() < 1e-6, "{:?}", g["theta"]);
    // Early stop at a 1e-12 term leaves a tail of about 4e-12.
    let g = grad_ift(&ScalarAffine, &SquaredError, &x_star, &c, &params, &y, 60).unwrap();
    assert!((g["theta"].item() - 8.0).abs() < 1e-10);
}

#[test]
fn zero_cotangent_gives_zero_gradient() {
    let (params, c, _, x_star) = scalar_case();
    let g = grad_ift(&ScalarAffine, &SquaredError, &x_star, &c, &params, &x_star, 30).unwrap();
    assert_eq!(g["theta"].item(), 0.0);
}

#[test]
fn linear_contraction_seed_three_matches_fd() {
    let map = LinearContraction {
        dim: 8,
        context_dim: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = map.random_params(0.5, &mut rng);
    let c = Array::vector((0..3).map(|_| standard_normal(&mut rng)).collect());
    let y = Array::vector((0..8).map(|_| standard_normal(&mut rng)).collect());
    let x0 = Array::zeros(&[8]);
    let x_star = solve_equilibrium(&map, SolverKind::Anderson, &x0, &c, &params, &tight())
        .unwrap()
        .state;
    let g = grad_ift(&map, &SquaredError, &x_star, &c, &params, &y, DEFAULT_NEUMANN_TERMS).unwrap();
    let fd = fd_through_solve(&map, &x0, &c, &params, &y);
    assert_grads_close(&g, &fd, 1e-4);
}

#[test]
fn attention_block_matches_fd() {
    let map = AttentionBlock {
        seq: 3,
        dim: 4,
        output_scale: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = map.random_params(&mut rng);
    let c = Array::matrix(3, 4, (0..12).map(|_| standard_normal(&mut rng)).collect()).unwrap();
    let y = Array::matrix(3, 4, (0..12).map(|_| 0.3 * standard_normal(&mut rng)).collect()).unwrap();
    let x0 = Array::zeros(&[3, 4]);
    let solved = solve_equilibrium(&map, SolverKind::Anderson, &x0, &c, &params, &tight()).unwrap();
    assert!(solved.converged);
    let g = grad_ift(&map, &SquaredError, &solved.state, &c, &params, &y, 200).unwrap();
    let fd = fd_through_solve(&map, &x0, &c, &params, &y);
    assert_grads_close(&g, &fd, 1e-4);
}

#[test]
fn jacobian_free_scalar_is_four() {
    let (params, c, y, x_star) = scalar_case();
    let g = grad_jacobian_free(&ScalarAffine, &SquaredError, &x_star, &c, &params, &y).unwrap();
    assert_eq!(g["theta"].item(), 4.0);
}

#[test]
fn jacobian_free_equals_truncated_ift_and_one_step_backprop() {
    let map = LinearContraction {
        dim: 6,
        context_dim: 2,
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = map.random_params(0.6, &mut rng);
        let c = Array::vector(vec![0.3, -1.2]);
        let y = Array::vector((0..6).map(|_| standard_normal(&mut rng)).collect());
        let x_star = solve_equilibrium(&map, SolverKind::Plain, &Array::zeros(&[6]), &c, &params, &tight())
            .unwrap()
            .state;
        let jf = grad_jacobian_free(&map, &SquaredError, &x_star, &c, &params, &y).unwrap();
        let k0 = grad_ift(&map, &SquaredError, &x_star, &c, &params, &y, 0).unwrap();
        assert_eq!(jf, k0);
        let (_, direct) = grad_one_step(&map, &SquaredError, &x_star, &c, &params, &y).unwrap();
        for (name, g) in &jf {
            assert!(g.max_abs_diff(&direct[name]) < 1e-12, "{name}");
        }
    }
}

#[test]
fn jacobian_free_uses_one_backward_pass() {
    let (params, c, y, x_star) = scalar_case();
    let before = backward_pass_count();
    grad_jacobian_free(&ScalarAffine, &SquaredError, &x_star, &c, &params, &y).unwrap();
    assert_eq!(backward_pass_count() - before, 1);
}

#[test]
fn unrolled_examples() {
    let (params, c, y, x_star) = scalar_case();
    let one = grad_unrolled(&ScalarAffine, &SquaredError, &x_star, &c, &params, &y, 1).unwrap();
    assert!((one["theta"].item() - 4.0).abs() < 1e-12);
    let zero = Array::vector(vec![0.0]);
    let fifty = grad_unrolled(&ScalarAffine, &SquaredError, &zero, &c, &params, &y, 50).unwrap();
    assert!((fifty["theta"].item() - 8.0).abs() < 1e-5, "{:?}", fifty["theta"]);
    let two = grad_unrolled(&ScalarAffine, &SquaredError, &x_star, &c, &params, &y, 2).unwrap();
    assert_ne!(one["theta"].item(), two["theta"].item());
    assert!(matches!(
        grad_unrolled(&ScalarAffine, &SquaredError, &zero, &c, &params, &y, 201),
        Err(EqGradError::TooManySteps { steps: 201, cap: 200 })
    ));
    assert!(matches!(
        grad_unrolled(&ScalarAffine, &SquaredError, &zero, &c, &params, &y, 0),
        Err(EqGradError::NoSteps)
    ));
}

#[test]
fn unrolled_gap_shrinks_geometrically() {
    let map = LinearContraction {
        dim: 8,
        context_dim: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = map.random_params(0.5, &mut rng);
    let c = Array::vector(vec![1.0, -0.5, 0.25]);
    let y = Array::vector((0..8).map(|_| standard_normal(&mut rng)).collect());
    let x0 = Array::zeros(&[8]);
    let x_star = solve_equilibrium(&map, SolverKind::Anderson, &x0, &c, &params, &tight())
        .unwrap()
        .state;
    let ift = grad_ift(&map, &SquaredError, &x_star, &c, &params, &y, 200).unwrap();
    let gaps: Vec<f64> = [1, 5, 10, 25, 50]
        .iter()
        .map(|&k| {
            let g = grad_unrolled(&map, &SquaredError, &x0, &c, &params, &y, k).unwrap();
            grad_distance(&g, &ift)
        })
        .collect();
    for w in gaps.windows(2) {
        assert!(w[1] < w[0], "{gaps:?}");
    }
    assert!(gaps[4] < 1e-5, "{gaps:?}");
}

#[test]
fn solves_run_without_differentiation() {
    struct Probe;
    impl DifferentiableMap for Probe {
        fn build(
            &self,
            b: &mut GraphBuilder,
            x: NodeId,
            c: NodeId,
            params: &ParameterSet,
        ) -> Result<NodeId, NumericsError> {
            ScalarAffine.build(b, x, c, params)
        }
    }
    let (params, c, _, _) = scalar_case();
    let compiled = CompiledMap::new(&Probe, &[1], &[1], &params).unwrap();
    let before = backward_pass_count();
    let mut saw_grad = false;
    no_grad(|| ()); // the flag is restored after a scope
    assert!(grad_enabled());
    let r = no_grad(|| {
        fixedpoint::solve_plain(
            |x: &Array| {
                saw_grad |= grad_enabled();
                compiled.forward(x, &c, &params).map_err(|e| match e {
                    EqGradError::Numerics(n) => n,
                    other => panic!("{other}"),
                })
            },
            &Array::vector(vec![0.0]),
            &SolveConfig::default(),
        )
    })
    .unwrap();
    assert!(!saw_grad);
    assert!(r.converged);
    let r2 = compiled
        .solve(SolverKind::Broyden, &Array::vector(vec![0.0]), &c, &params, &SolveConfig::default())
        .unwrap();
    assert!((r2.state.item() - 2.0).abs() < 1e-7);
    assert_eq!(backward_pass_count(), before);
    assert!(grad_enabled());
}

#[test]
fn training_step_examples() {
    let (mut params, c, y, x_star) = scalar_case();
    let objective = MapObjective {
        map: &ScalarAffine,
        loss: &SquaredError,
    };
    let report =
        equilibrium_training_step(&objective, &x_star, &c, &y, &mut params, &mut Sgd { lr: 0.1 })
            .unwrap();
    assert!(!report.skipped);
    assert!((params.get("theta").unwrap().item() - 0.1).abs() < 1e-15);
    // f(2) = 0.1·2 + 1 = 1.2, loss ½·1.44
    assert!(relative_error(report.loss_after, 0.72, 1e-12) < 1e-12);
    assert!(relative_error(report.loss_before, 2.0, 1e-12) < 1e-12);

    // Zero loss: f(x*) = y exactly.
    let mut params = ScalarAffine::params(0.5);
    let target = Array::vector(vec![2.0]);
    let mut adam = Adam::new(AdamConfig::default());
    let report =
        equilibrium_training_step(&objective, &x_star, &c, &target, &mut params, &mut adam).unwrap();
    assert_eq!(report.loss_before, 0.0);
    assert!((params.get("theta").unwrap().item() - 0.5).abs() <= 1e-8);
}

#[test]
fn training_step_skips_non_finite_loss() {
    let (mut params, c, _, x_star) = scalar_case();
    let objective = MapObjective {
        map: &ScalarAffine,
        loss: &SquaredError,
    };
    let y = Array::vector(vec![f64::INFINITY]);
    let report =
        equilibrium_training_step(&objective, &x_star, &c, &y, &mut params, &mut Sgd { lr: 0.1 })
            .unwrap();
    assert!(report.skipped);
    assert_eq!(params.get("theta").unwrap().item(), 0.5);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut params = ScalarAffine::params(0.5);
    let mut grads = Gradients::new();
    grads.insert("theta".into(), Array::vector(vec![-3.0]));
    let mut adam = Adam::new(AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    });
    adam.step(&mut params, &grads).unwrap();
    assert!((params.get("theta").unwrap().item() - 0.51).abs() < 1e-9);
    assert_eq!(adam.steps(), 1);
    grads.insert("missing".into(), Array::vector(vec![1.0]));
    assert!(adam.step(&mut params, &grads).is_err());
}

#[test]
fn state_shape_mismatch_is_rejected() {
    let map = LinearContraction {
        dim: 4,
        context_dim: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = map.random_params(0.5, &mut rng);
    let err = CompiledMap::new(&map, &[3], &[2], &params).unwrap_err();
    assert!(matches!(err, EqGradError::Numerics(_)), "{err}");
}

#[test]
fn squared_error_graph_matches_closed_form() {
    for shape in [vec![5], vec![2, 3]] {
        let n: usize = shape.iter().product();
        let x = Array::new(shape.clone(), (0..n).map(|i| i as f64 * 0.3).collect()).unwrap();
        let y = Array::new(shape.clone(), (0..n).map(|i| 1.0 - i as f64 * 0.1).collect()).unwrap();
        let mut b = GraphBuilder::new();
        let xn = b.input("x", &shape).unwrap();
        let l = SquaredError.build(&mut b, xn, &y).unwrap();
        b.output("l", l);
        let g = b.finish();
        let out = crate::numerics::evaluate(&g, &Bindings::new().with("x", &x)).unwrap();
        let v: f64 = out["l"].data().iter().sum();
        assert!((v - SquaredError.value(&x, &y)).abs() < 1e-12);
    }
}
