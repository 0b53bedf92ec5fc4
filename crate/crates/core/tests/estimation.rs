use nalgebra::{DMatrix, DVector};
use predpower::error::Error;
use predpower::estimation::{
    ecce, fit_linear, per_step_mse, prediction_power_evaluate, total_covariance_check, HistoryWindow,
    PowerEvalConfig, RegressionDataset, RegressorConfig,
};
use predpower::linalg::min_eigenvalue;
use predpower::lqr::{prediction_power_closed_form, riccati_backward};
use predpower::predictors::{PredictorModel, SampledInstances};
use predpower::presets;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ecce_is_positive_semidefinite(seed in 0u64..10_000, p in 1usize..4, q in 1usize..4, noise in 0.0f64..2.0) {
        let x = normal(400, p, seed);
        let w = normal(p, q, seed + 1);
        let y = &x * w + normal(400, q, seed + 2) * noise;
        let ds = RegressionDataset::new(x, y, (0.7, 0.1, 0.2)).unwrap();
        let c = ecce(&ds, &RegressorConfig::default()).unwrap();
        prop_assert!(min_eigenvalue(&c.matrix) >= -1e-12);
        prop_assert_eq!(c.count, ds.n_test());
        prop_assert!((&c.matrix - c.matrix.transpose()).norm() == 0.0);
    }

    #[test]
    fn total_covariance_holds_for_any_nesting(seed in 0u64..10_000, coarse in 1usize..4, split in 1usize..4) {
        let pts = normal(300, 2, seed);
        let x: Vec<DVector<f64>> = pts.row_iter().map(|r| r.transpose()).collect();
        let f: Vec<usize> = (0..300).map(|i| i % coarse).collect();
        let fine: Vec<usize> = (0..300).map(|i| (i % coarse) * split + (i / 7) % split).collect();
        let rep = total_covariance_check(&x, &f, &fine).unwrap();
        prop_assert!(rep.defect < 1e-12);
    }
}

#[test]
fn total_covariance_by_hand() {
    let x: Vec<DVector<f64>> = [0.0, 1.0, 2.0, 3.0].iter().map(|&v| DVector::from_element(1, v)).collect();
    let rep = total_covariance_check(&x, &[0, 0, 1, 1], &[0, 1, 2, 3]).unwrap();
    assert!((rep.explained[(0, 0)] - 0.25).abs() < 1e-15);
    assert!((rep.coarse[(0, 0)] - 0.25).abs() < 1e-15);
    assert_eq!(rep.fine[(0, 0)], 0.0);

    // Three equally likely values, coarse = everything, fine = exact value.
    let y: Vec<DVector<f64>> = (0..300).map(|i| DVector::from_element(1, (i % 3) as f64)).collect();
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let rep = total_covariance_check(&y, &vec![0; 300], &labels).unwrap();
    assert!((rep.explained[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);

    assert!(matches!(total_covariance_check(&x, &[0, 1, 0, 1], &[0, 0, 1, 1]), Err(Error::NotNested(_))));
}

#[test]
fn sign_split_of_a_gaussian() {
    let pts = normal(50_000, 1, 13);
    let x: Vec<DVector<f64>> = pts.iter().map(|&v| DVector::from_element(1, v)).collect();
    let sign: Vec<usize> = pts.iter().map(|&v| (v > 0.0) as usize).collect();
    let rep = total_covariance_check(&x, &vec![0; x.len()], &sign).unwrap();
    // Var(E[X | sign X]) = 2/π.
    assert!((rep.explained[(0, 0)] - 2.0 / std::f64::consts::PI).abs() < 0.02);
    assert!((rep.fine[(0, 0)] - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 0.02);
}

#[test]
fn affine_weights_are_rho_theta_transpose() {
    let rho = 0.6;
    let theta = presets::rotated_theta();
    let model = PredictorModel::affine_gaussian(rho, theta.clone(), 1).unwrap();
    let inst = predpower::predictors::sample_instances(&model, 31, 40_000);
    let x = DMatrix::from_fn(inst.len(), 2, |i, j| inst[i].v[0][j]);
    let y = DMatrix::from_fn(inst.len(), 2, |i, j| inst[i].w[0][j]);
    let ds = RegressionDataset::new(x, y, (0.7, 0.1, 0.2)).unwrap();
    let fit = fit_linear(&ds, &RegressorConfig::default()).unwrap();
    // Rows of the fitted weights index features, so weightsᵀ estimates ρθᵀ.
    assert!((fit.weights.transpose() - theta.transpose() * rho).abs().max() < 0.02);
}

#[test]
fn estimate_is_the_sum_of_trace_differences() {
    let sys = presets::stable_scalar(10).unwrap();
    let model = PredictorModel::affine_gaussian(0.5, DMatrix::identity(1, 1), 10).unwrap();
    let src = SampledInstances { model: &model, seed: 4, count: 5000 };
    let est = prediction_power_evaluate(&sys, &src, &PowerEvalConfig::default()).unwrap();
    let sum: f64 = est.terms.iter().map(|t| t.trace_baseline - t.trace_theta).sum();
    assert_eq!(est.estimate, sum);
    assert_eq!(est.terms.len(), 10);
    assert_eq!(est.test_count, 1000);
    assert!(est.terms.iter().all(|t| t.m_min_eig > 0.0));

    let ric = riccati_backward(&sys).unwrap();
    let cf = prediction_power_closed_form(&sys, &ric, &model).unwrap();
    assert!((est.estimate - cf).abs() < 3.0 * est.std_error + 0.05 * cf, "{} vs {cf} ± {}", est.estimate, est.std_error);
}

#[test]
fn baseline_as_predictor_has_no_power() {
    let sys = presets::double_integrator(8).unwrap();
    let model = PredictorModel::baseline(2, 8).unwrap();
    let src = SampledInstances { model: &model, seed: 6, count: 2000 };
    let est = prediction_power_evaluate(&sys, &src, &PowerEvalConfig::default()).unwrap();
    assert!(est.estimate.abs() < 1e-10, "{}", est.estimate);
}

#[test]
fn current_prediction_is_a_sufficient_window() {
    let sys = presets::stable_scalar(8).unwrap();
    let model = PredictorModel::affine_gaussian(0.7, DMatrix::identity(1, 1), 8).unwrap();
    let src = SampledInstances { model: &model, seed: 8, count: 6000 };
    let narrow = PowerEvalConfig { window: HistoryWindow::Recent { predictions: 1, disturbances: 0 }, ..Default::default() };
    let full = PowerEvalConfig { window: HistoryWindow::Full, ..Default::default() };
    let a = prediction_power_evaluate(&sys, &src, &narrow).unwrap();
    let b = prediction_power_evaluate(&sys, &src, &full).unwrap();
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.estimate - b.estimate).abs() < 2.0 * se, "{} vs {} ± {se}", a.estimate, b.estimate);
}

#[test]
fn feature_budget_is_enforced() {
    let sys = presets::stable_scalar(50).unwrap();
    let model = PredictorModel::affine_gaussian(0.5, DMatrix::identity(1, 1), 50).unwrap();
    let src = SampledInstances { model: &model, seed: 1, count: 2000 };
    let cfg = PowerEvalConfig { window: HistoryWindow::Full, feature_budget: 10_000, ..Default::default() };
    assert!(matches!(prediction_power_evaluate(&sys, &src, &cfg), Err(Error::HistoryFeatureOverflow { .. })));
    let few = SampledInstances { model: &model, seed: 1, count: 999 };
    assert!(matches!(prediction_power_evaluate(&sys, &few, &PowerEvalConfig::default()), Err(Error::InsufficientData(_))));
}

#[test]
fn per_step_mse_of_current_and_next_disturbance() {
    let rho = 0.6;
    let model = PredictorModel::affine_gaussian(rho, DMatrix::identity(1, 1), 5).unwrap();
    let src = SampledInstances { model: &model, seed: 2, count: 40_000 };
    let out = per_step_mse(&src, &[1, 4], HistoryWindow::default(), &RegressorConfig::default()).unwrap();
    assert!((out[0].mse_current - (1.0 - rho * rho)).abs() < 4.0 * out[0].se_current);
    assert!((out[0].mse_next.unwrap() - 1.0).abs() < 4.0 * out[0].se_next.unwrap());
    assert!(out[1].mse_next.is_none());
    assert!(per_step_mse(&src, &[5], HistoryWindow::default(), &RegressorConfig::default()).is_err());
}
