use std::path::PathBuf;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use predpower::lqr::{
    optimal_action, optimal_feedforward, riccati_backward, surrogate_actions_all, surrogate_optimal_action, LtvSystem,
};
use predpower::presets;
use predpower::rollout::{certainty_equivalent_plan, CostSpec, PlannerOptions};
use proptest::prelude::*;

const GOLDEN_PHI: f64 = 1.618_033_988_749_895;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a stored CSV; `BLESS=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).expect("golden file present");
    let (mut e, mut a) = (expected.lines(), actual.lines());
    assert_eq!(e.next(), a.next(), "header");
    for (le, la) in e.zip(a) {
        for (x, y) in le.split(',').zip(la.split(',')) {
            if x.is_empty() || y.is_empty() {
                assert_eq!(x, y);
                continue;
            }
            let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()), "{name}: {x} vs {y}");
        }
    }
    assert_eq!(expected.lines().count(), actual.lines().count());
}

#[test]
fn scalar_fixed_point_is_stationary() {
    let sys = presets::scalar_unit(25).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    for t in 0..=25 {
        assert_abs_diff_eq!(ric.p[t][(0, 0)], GOLDEN_PHI, epsilon = 1e-12);
    }
    for k in &ric.k {
        assert_abs_diff_eq!(k[(0, 0)], GOLDEN_PHI - 1.0, epsilon = 1e-12);
    }
}

#[test]
fn no_control_authority() {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.0, 0.7]);
    let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
    let sys = LtvSystem::time_invariant(
        a.clone(),
        DMatrix::zeros(2, 1),
        q.clone(),
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2),
        DVector::zeros(2),
        6,
    )
    .unwrap();
    let ric = riccati_backward(&sys).unwrap();
    for t in (0..6).rev() {
        assert!(ric.k[t].norm() == 0.0);
        let expected = &q + a.transpose() * &ric.p[t + 1] * &a;
        assert!((&ric.p[t] - expected).norm() < 1e-12);
    }
}

#[test]
fn double_integrator_matches_golden() {
    let sys = presets::double_integrator(10).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    check_golden("double_integrator_t10.csv", &ric.to_csv());
    for t in 0..10 {
        let prod = &ric.m[t] * &ric.m_inv[t];
        assert!((prod - DMatrix::identity(1, 1)).norm() < 1e-12);
    }
}

#[test]
fn riccati_differences_shrink() {
    for sys in [presets::scalar_unit(60).unwrap(), presets::double_integrator(400).unwrap()] {
        let mut sys = sys;
        sys.p_terminal = DMatrix::identity(sys.n(), sys.n()) * 5.0;
        let ric = riccati_backward(&sys).unwrap();
        let diffs: Vec<f64> = (1..=sys.horizon).map(|t| (&ric.p[t - 1] - &ric.p[t]).norm()).collect();
        let burn_in = sys.horizon / 2;
        for w in diffs[..burn_in].windows(2) {
            assert!(w[0] <= w[1] + 1e-14);
        }
        assert!(diffs[0] < 1e-8);
    }
}

#[test]
fn terminal_step_feedforward() {
    let sys = presets::scalar_unit(5).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    let one = DVector::from_element(1, 1.0);
    let u = optimal_feedforward(&ric, &sys, 4, std::slice::from_ref(&one)).unwrap();
    assert_abs_diff_eq!(u[0], -GOLDEN_PHI / (1.0 + GOLDEN_PHI), epsilon = 1e-12);
    let zeros = vec![DVector::zeros(1); 5];
    assert_eq!(optimal_feedforward(&ric, &sys, 0, &zeros).unwrap()[0], 0.0);
    assert!(optimal_feedforward(&ric, &sys, 0, &zeros[..3]).is_err());
}

#[test]
fn two_step_surrogate_by_hand() {
    let sys = presets::scalar_unit(5).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    let w = vec![DVector::from_element(1, 1.0); 2];
    let u = surrogate_optimal_action(&ric, &sys, 3, &w).unwrap()[0];
    let (p, k) = (GOLDEN_PHI, GOLDEN_PHI - 1.0);
    let expected = -(p + (1.0 - k) * p) / (1.0 + p);
    assert_abs_diff_eq!(u, expected, epsilon = 1e-12);
    assert_abs_diff_eq!(u, -0.854, epsilon = 1e-3);
}

#[test]
fn double_integrator_terminal_feedforward() {
    let sys = presets::double_integrator(8).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    let w = DVector::from_vec(vec![1.0, 0.0]);
    let u = optimal_feedforward(&ric, &sys, 7, std::slice::from_ref(&w)).unwrap();
    let expected = -(&ric.m_inv[7] * sys.b[7].transpose() * &ric.p[8] * &w);
    assert!((u - expected).norm() < 1e-14);
}

#[test]
fn surrogate_recursion_matches_direct_sums() {
    let sys = presets::double_integrator(12).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    let w: Vec<DVector<f64>> = (0..12).map(|t| DVector::from_vec(vec![(t as f64).sin(), (t as f64 * 0.7).cos()])).collect();
    let fast = surrogate_actions_all(&ric, &sys, &w).unwrap();
    for t in 0..12 {
        let direct = surrogate_optimal_action(&ric, &sys, t, &w[t..]).unwrap();
        assert!((&fast[t] - direct).norm() < 1e-12);
    }
}

fn random_system(seed: &[f64], horizon: usize) -> LtvSystem {
    let a: Vec<DMatrix<f64>> =
        (0..horizon).map(|t| DMatrix::from_fn(2, 2, |i, j| seed[(t + 2 * i + j) % seed.len()] * 0.6)).collect();
    let b: Vec<DMatrix<f64>> =
        (0..horizon).map(|t| DMatrix::from_fn(2, 1, |i, _| 0.5 + seed[(t + i + 3) % seed.len()].abs())).collect();
    LtvSystem::new(
        a,
        b,
        vec![DMatrix::identity(2, 2); horizon],
        vec![DMatrix::identity(1, 1) * 0.5; horizon],
        DMatrix::identity(2, 2),
        DVector::zeros(2),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn phi_semigroup(seed in prop::collection::vec(-1.0f64..1.0, 5), t1 in 0usize..9, d1 in 0usize..5, d2 in 0usize..5) {
        let sys = random_system(&seed, 18);
        let ric = riccati_backward(&sys).unwrap();
        let (t2, t3) = (t1 + d1, t1 + d1 + d2);
        let lhs = ric.phi(t3, t1);
        let rhs = ric.phi(t3, t2) * ric.phi(t2, t1);
        prop_assert!((lhs - rhs).norm() < 1e-10);
        prop_assert!((ric.phi(t1, t1) - DMatrix::identity(2, 2)).norm() == 0.0);
    }

    #[test]
    fn optimal_action_is_the_first_planned_action(
        x in prop::collection::vec(-2.0f64..2.0, 2),
        means in prop::collection::vec(-1.0f64..1.0, 12),
        t in 0usize..5,
    ) {
        let sys = presets::double_integrator(6).unwrap();
        let ric = riccati_backward(&sys).unwrap();
        let x = DVector::from_vec(x);
        let means: Vec<DVector<f64>> = (t..6).map(|k| DVector::from_vec(vec![means[2 * k], means[2 * k + 1]])).collect();
        let u = optimal_action(&ric, &sys, t, &x, &means).unwrap();
        let plan = certainty_equivalent_plan(&CostSpec::from_system(&sys), &sys, t, &x, &means, &PlannerOptions::default()).unwrap();
        prop_assert!((&u - &plan[0]).norm() < 1e-8, "{} vs {}", u, plan[0]);
    }

    #[test]
    fn zero_means_reduce_to_feedback(x in prop::collection::vec(-3.0f64..3.0, 2), t in 0usize..10) {
        let sys = presets::double_integrator(10).unwrap();
        let ric = riccati_backward(&sys).unwrap();
        let x = DVector::from_vec(x);
        let zeros = vec![DVector::zeros(2); 10 - t];
        let u = optimal_action(&ric, &sys, t, &x, &zeros).unwrap();
        prop_assert!((u + &ric.k[t] * &x).norm() < 1e-14);
    }
}

#[test]
fn large_horizons_use_the_running_product() {
    let sys = presets::double_integrator(30_000).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    assert!(!ric.has_dense_phi());
    let small = riccati_backward(&presets::double_integrator(50).unwrap()).unwrap();
    assert!(small.has_dense_phi());
    let p = ric.phi(20, 10);
    let q = &ric.closed_loop[19] * ric.phi(19, 10);
    assert!((p - q).norm() < 1e-12);
}

#[test]
fn singular_input_weight_is_rejected() {
    let zero = DMatrix::zeros(1, 1);
    let sys = LtvSystem::new_semidefinite(
        vec![DMatrix::identity(1, 1)],
        vec![zero.clone()],
        vec![DMatrix::identity(1, 1)],
        vec![zero],
        DMatrix::identity(1, 1),
        DVector::zeros(1),
    )
    .unwrap();
    let err = riccati_backward(&sys).unwrap_err();
    assert!(matches!(err, predpower::error::Error::NonInvertible { .. }), "{err}");
}
