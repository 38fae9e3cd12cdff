use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector, Vector4};
use proptest::prelude::*;

use ibvs_mpc::interaction::interaction_matrix;
use ibvs_mpc::mpc::{build_prediction, condense, discretize, kkt_report, mpc_step, MpcConfig, QpStatus};
use ibvs_mpc::FeatureVector;

fn centered(z: f64) -> ibvs_mpc::InteractionMatrix {
    interaction_matrix(&FeatureVector::new(0.0, 0.0, z, 0.0), z).unwrap()
}

fn small_cfg() -> MpcConfig {
    MpcConfig {
        horizon: 6,
        ..MpcConfig::default()
    }
}

#[test]
fn unconstrained_matches_normal_equations() {
    let cfg = MpcConfig::default().unconstrained();
    let q = FeatureVector::new(0.1, -0.2, 1.3, 0.2);
    let l = interaction_matrix(&q, 1.0).unwrap();
    let e = Vector4::new(0.3, -0.1, 0.2, 0.15);
    let step = mpc_step(&e, &l, &cfg).unwrap();

    // Oracle: minimize |Q^1/2 (Phi e + Gamma U)|^2 + |R^1/2 U|^2 by forming
    // the stacked least-squares normal equations directly.
    let (a, b) = discretize(&l, cfg.sample_period).unwrap();
    let n = cfg.horizon;
    let mut gamma = DMatrix::zeros(4 * n, 4 * n);
    for i in 0..n {
        for j in 0..=i {
            let blk = a.pow((i - j) as u32) * b;
            gamma.fixed_view_mut::<4, 4>(4 * i, 4 * j).copy_from(&blk);
        }
    }
    let mut weights = DVector::zeros(4 * n);
    for i in 0..4 * n {
        weights[i] = cfg.q[i % 4][i % 4] + if i >= 4 * (n - 1) { cfg.p_term[i % 4][i % 4] } else { 0.0 };
    }
    let w = DMatrix::from_diagonal(&weights);
    let free = DVector::from_fn(4 * n, |i, _| e[i % 4]);
    let lhs = gamma.transpose() * &w * &gamma + DMatrix::identity(4 * n, 4 * n);
    let rhs = -(gamma.transpose() * &w * free);
    let u = lhs.lu().solve(&rhs).unwrap();
    for i in 0..4 {
        assert_relative_eq!(step.u.as_vector()[i], u[i], epsilon = 1e-8);
    }
    assert_eq!(step.solution.status, QpStatus::Optimal);
}

#[test]
fn horizon_rollout_matches_prediction() {
    let cfg = MpcConfig::default();
    let q = FeatureVector::new(0.2, 0.1, 1.1, -0.1);
    let l = interaction_matrix(&q, 1.0).unwrap();
    let e = Vector4::new(0.5, -0.3, 0.4, 0.3);
    let step = mpc_step(&e, &l, &cfg).unwrap();
    let (a, b) = discretize(&l, cfg.sample_period).unwrap();
    let mut x = e;
    for i in 0..cfg.horizon {
        let u = step.solution.u.fixed_rows::<4>(4 * i).into_owned();
        x = a * x + b * u;
        assert!((x - step.predicted[i]).amax() <= 1e-10);
    }
}

#[test]
fn optimal_solutions_are_kkt_certified() {
    let cfg = MpcConfig::default();
    for (i, e) in [
        Vector4::new(0.8, -0.4, 0.6, 0.5),
        Vector4::new(0.05, 0.02, -0.01, 0.0),
        Vector4::new(-1.0, 1.0, 0.9, -0.45),
    ]
    .iter()
    .enumerate()
    {
        let l = centered(1.0);
        let (a, b) = discretize(&l, cfg.sample_period).unwrap();
        let pred = build_prediction(&a, &b, cfg.horizon).unwrap();
        let c = condense(e, &pred, &cfg).unwrap();
        let step = mpc_step(e, &l, &cfg).unwrap();
        assert_eq!(step.solution.status, QpStatus::Optimal, "case {i}");
        let rep = kkt_report(&c.qp, &step.solution.u, &step.solution.lambda, &step.solution.nu);
        assert!(rep.stationarity <= 1e-6, "{rep:?}");
        assert!(rep.primal <= 1e-8, "{rep:?}");
        assert!(rep.dual <= 0.0, "{rep:?}");
        assert!(rep.complementarity <= 1e-6, "{rep:?}");
    }
}

#[test]
fn input_box_saturation_matches_oracle() {
    let mut cfg = MpcConfig::default().unconstrained();
    cfg.input_constraints = true;
    cfg.u_min = [-0.5; 4];
    cfg.u_max = [0.5; 4];
    cfg.horizon = 5;
    let l = centered(1.0);
    let e = Vector4::new(1.2, -0.9, 0.7, 0.6);
    let free = mpc_step(&e, &l, &cfg.clone().unconstrained()).unwrap();
    assert!(free.u.as_vector().amax() > 0.5);
    let step = mpc_step(&e, &l, &cfg).unwrap();

    // Projected-gradient oracle on the same box QP.
    let (a, b) = discretize(&l, cfg.sample_period).unwrap();
    let pred = build_prediction(&a, &b, cfg.horizon).unwrap();
    let qp = condense(&e, &pred, &cfg).unwrap().qp;
    let lip = qp.h.clone().symmetric_eigen().eigenvalues.max();
    let mut u = DVector::zeros(qp.num_vars());
    for _ in 0..200_000 {
        let g = &qp.h * &u + &qp.f;
        u = (&u - g / lip).map(|v| v.clamp(-0.5, 0.5));
    }
    assert!((step.solution.u.clone() - &u).amax() <= 1e-6);
    assert_relative_eq!(step.solution.objective, qp.objective(&u), epsilon = 1e-8);
    for v in step.u.as_vector().iter() {
        assert!(v.abs() <= 0.5 + 1e-8);
    }
}

#[test]
fn cost_descends_along_converging_trajectory() {
    // Model equals plant (fixed L), terminal constraint active throughout.
    let cfg = MpcConfig::default();
    let l = centered(1.0);
    let (a, b) = discretize(&l, cfg.sample_period).unwrap();
    let mut e = Vector4::new(0.45, -0.3, 0.4, 0.3);
    let mut last = f64::INFINITY;
    for k in 0..90 {
        let step = mpc_step(&e, &l, &cfg).unwrap();
        assert_eq!(step.solution.status, QpStatus::Optimal);
        assert!(step.cost <= last + 1e-6, "step {k}: {} > {last}", step.cost);
        last = step.cost;
        e = a * e + b * step.u.as_vector();
    }
    assert!(e.norm() < 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adding_constraints_never_lowers_cost(
        ex in -1.0f64..1.0, ey in -1.0f64..1.0, ez in -1.0f64..1.0, et in -0.4f64..0.4,
        x in -0.3f64..0.3, y in -0.3f64..0.3,
    ) {
        let e = Vector4::new(ex, ey, ez, et);
        let l = interaction_matrix(&FeatureVector::new(x, y, 1.0, 0.0), 1.0).unwrap();
        let base = small_cfg();
        let none = mpc_step(&e, &l, &base.clone().unconstrained()).unwrap();
        let mut input = base.clone().unconstrained();
        input.input_constraints = true;
        let one = mpc_step(&e, &l, &input).unwrap();
        let mut state = input.clone();
        state.state_constraints = true;
        let two = mpc_step(&e, &l, &state).unwrap();
        prop_assert!(one.cost >= none.cost - 1e-7);
        prop_assert!(two.cost >= one.cost - 1e-7);
    }

    #[test]
    fn zero_error_gives_zero_command(x in -0.3f64..0.3, y in -0.3f64..0.3, z in 0.5f64..2.0) {
        let l = interaction_matrix(&FeatureVector::new(x, y, z, 0.0), z).unwrap();
        let step = mpc_step(&Vector4::zeros(), &l, &small_cfg()).unwrap();
        prop_assert!(step.u.as_vector().amax() <= 1e-9);
    }
}
