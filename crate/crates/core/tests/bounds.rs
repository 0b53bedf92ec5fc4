use nalgebra::{DMatrix, DVector};
use predpower::bounds::{
    action_variance_check, conjugacy_check, covariance_power_bound, curvature_power_bound, curvature_probe,
    dp_power_mc, growth_condition_check, infimal_convolution, mu_ell_recursion, sigma_lower,
    variance_condition_check, variance_passthrough_check, Certificates, CheckBudget, CostConditioning,
    CovarianceBound, InputGainBound, ScalarLaw, ScalarProblem,
};
use predpower::convex::{ConvexFn, ScalarTerm};
use predpower::error::Error;
use predpower::lqr::{feedforward_covariance, prediction_power_closed_form, riccati_backward};
use predpower::predictors::PredictorModel;
use predpower::presets;
use proptest::prelude::*;

fn conditioning() -> impl Strategy<Value = CostConditioning> {
    (0.01f64..5.0, 0.0f64..3.0, 0.0f64..5.0, 0.0f64..3.0, 0.0f64..0.99, 0.0f64..1.0, 0.0f64..4.0, 0.0f64..2.0)
        .prop_map(|(mx, dx, mu, du, la, fa, mb, db)| CostConditioning {
            mu_x: mx,
            ell_x: mx + dx,
            mu_u: mu,
            ell_u: mu + du,
            mu_a: la * fa,
            ell_a: la,
            mu_b: mb,
            ell_b: mb + db,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn recursion_respects_its_uniform_bounds(cond in conditioning(), horizon in 1usize..60) {
        for b2 in [InputGainBound::Upper, InputGainBound::Lower] {
            let me = mu_ell_recursion(&cond, horizon, b2).unwrap();
            for t in 0..=horizon {
                prop_assert!(me.mu[t] >= cond.mu_x);
                prop_assert!(me.ell[t] <= me.ell_ceiling);
                prop_assert!(me.mu[t] <= me.ell[t] + 1e-12 * me.ell[t]);
            }
        }
    }

    #[test]
    fn curvature_bound_is_monotone_in_lambda(cond in conditioning(), lam in 0.0f64..1.0, extra in 0.0f64..1.0) {
        let lo = curvature_power_bound(&cond, &[lam; 5], 1, InputGainBound::Upper).unwrap();
        let hi = curvature_power_bound(&cond, &[lam + extra; 5], 1, InputGainBound::Upper).unwrap();
        prop_assert!(lo >= 0.0 && lo <= hi);
    }
}

#[test]
fn recursion_reproduces_scalar_riccati_curvature() {
    // Quadratic costs q x² have Hessian 2q, so the exact curvature of the
    // cost-to-go is 2 P_t.
    let (a, b, q, r) = (0.6, 0.8, 1.5, 0.7);
    let horizon = 25;
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let sys = predpower::LtvSystem::time_invariant(one(a), one(b), one(q), one(r), one(q), DVector::zeros(1), horizon)
        .unwrap();
    let ric = riccati_backward(&sys).unwrap();
    let cond = CostConditioning::scalar(a, b, 2.0 * q, 2.0 * q, 2.0 * r, 2.0 * r);
    let me = mu_ell_recursion(&cond, horizon, InputGainBound::Upper).unwrap();
    for t in 0..=horizon {
        let exact = 2.0 * ric.p[t][(0, 0)];
        assert!((me.mu[t] - exact).abs() < 1e-12 * exact, "{t}: {} vs {exact}", me.mu[t]);
        assert!(exact <= me.ell[t] + 1e-12);
    }
}

#[test]
fn covariance_bound_with_lqr_matrices_is_the_closed_form() {
    let sys = presets::double_integrator(40).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    for model in [
        PredictorModel::affine_gaussian(0.5, DMatrix::identity(2, 2), 40).unwrap(),
        PredictorModel::shifted_affine_gaussian(0.5, presets::rotated_theta(), 40).unwrap(),
    ] {
        let sigma: Vec<DMatrix<f64>> =
            (0..40).map(|t| feedforward_covariance(&sys, &ric, &model, t).unwrap()).collect();
        let bound = covariance_power_bound(&ric.m, &CovarianceBound::Matrices(sigma)).unwrap();
        let cf = prediction_power_closed_form(&sys, &ric, &model).unwrap();
        assert!((bound - cf).abs() <= 1e-10 * cf, "{bound} vs {cf}");
    }
}

#[test]
fn binary_example_bounds() {
    let t = 10;
    let ones = vec![DMatrix::from_element(1, 1, 1.0); t];
    let bound = covariance_power_bound(&ones, &CovarianceBound::Traces(vec![1.0; t])).unwrap();
    assert_eq!(bound, t as f64);
    assert_eq!(covariance_power_bound(&ones, &CovarianceBound::Matrices(ones.clone())).unwrap(), t as f64);
    let cond = CostConditioning { mu_x: 2.0, ell_x: 2.0, mu_u: 0.0, ell_u: 0.0, mu_a: 0.0, ell_a: 0.0, mu_b: 1.0, ell_b: 1.0 };
    let general = curvature_power_bound(&cond, &vec![1.0; t], 1, InputGainBound::Upper).unwrap();
    assert!(general <= t as f64);
    // The formula's per-step σ stays below the exact per-step gain.
    assert!(sigma_lower(&cond, 1.0, 2.0, 2.0, 1) / 2.0 <= 1.0);
}

#[test]
fn curvature_bound_below_the_closed_form_on_a_stable_system() {
    let sys = presets::stable_scalar(30).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    let rho = 0.5;
    let model = PredictorModel::affine_gaussian(rho, DMatrix::identity(1, 1), 30).unwrap();
    let cf = prediction_power_closed_form(&sys, &ric, &model).unwrap();
    let cond = CostConditioning::scalar(0.5, 1.0, 2.0, 2.0, 2.0, 2.0);
    let lambda = vec![rho * rho; 30];
    let general = curvature_power_bound(&cond, &lambda, 1, InputGainBound::Upper).unwrap();
    assert!(general > 0.0 && general <= cf, "{general} vs {cf}");
    assert_eq!(curvature_power_bound(&cond, &[0.0; 30], 1, InputGainBound::Upper).unwrap(), 0.0);
}

#[test]
fn double_integrator_is_outside_the_contraction_regime() {
    let a = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let ell_a = a.singular_values().max().powi(2);
    let cond = CostConditioning { mu_x: 2.0, ell_x: 2.0, mu_u: 2.0, ell_u: 2.0, mu_a: 0.9, ell_a, mu_b: 0.0, ell_b: 0.01 };
    assert!(matches!(curvature_power_bound(&cond, &[0.25; 5], 2, InputGainBound::Upper), Err(Error::InvalidArgument(_))));
}

#[test]
fn checkers_agree_with_the_lqr_oracle() {
    let problem = ScalarProblem::lqr(0.5, 1.0, 1.0, 1.0, 1.0, 4);
    let sys = presets::stable_scalar(4).unwrap();
    let ric = riccati_backward(&sys).unwrap();
    let rho = 0.5;
    let law = ScalarLaw::Gaussian { rho };
    let model = PredictorModel::affine_gaussian(rho, DMatrix::identity(1, 1), 4).unwrap();
    let budget = CheckBudget { outer: 400, inner: 40, seed: 5 };
    for t in 0..4 {
        let growth = growth_condition_check(&problem, &law, t, &budget).unwrap();
        let m = ric.m[t][(0, 0)];
        assert!((growth.m_candidate / m - 1.0).abs() < 1e-4, "t={t}: {} vs {m}", growth.m_candidate);
        let spread = variance_condition_check(&problem, &law, t, &budget).unwrap();
        let exact = feedforward_covariance(&sys, &ric, &model, t).unwrap()[(0, 0)];
        assert!(
            (spread.sigma_candidate - exact).abs() < 2.0 * spread.std_error + 1e-4 * exact,
            "t={t}: {} vs {exact} ± {}",
            spread.sigma_candidate,
            spread.std_error
        );
    }
    let mc = dp_power_mc(&problem, &law, 4000, 2, 40).unwrap();
    let cf = prediction_power_closed_form(&sys, &ric, &model).unwrap();
    assert!((mc.estimate - cf).abs() < 3.0 * mc.std_error + 0.01 * cf, "{} vs {cf} ± {}", mc.estimate, mc.std_error);
}

#[test]
fn nonquadratic_bounds_are_sound() {
    let problem = ScalarProblem::nonquadratic_toy();
    let law = ScalarLaw::Gaussian { rho: 0.8 };
    let cond = problem.conditioning().unwrap();
    let lambda = vec![law.explained_variance(); problem.horizon];
    let general = curvature_power_bound(&cond, &lambda, 1, InputGainBound::Upper).unwrap();
    let mc = dp_power_mc(&problem, &law, 20_000, 7, 40).unwrap();
    assert!(general <= mc.estimate + 3.0 * mc.std_error, "{general} vs {} ± {}", mc.estimate, mc.std_error);
    assert!(general > 0.0);
}

fn smooth_pair() -> (ConvexFn, ConvexFn, DMatrix<f64>) {
    let f = ConvexFn::separable(DVector::from_vec(vec![1.0, 1.5]), 0.1, ScalarTerm::Quartic);
    let omega = ConvexFn::separable(DVector::from_vec(vec![2.0, 2.0]), 0.3, ScalarTerm::LogCosh);
    let b = DMatrix::from_row_slice(2, 2, &[0.8, -0.3, 0.2, 0.6]);
    (f, omega, b)
}

#[test]
fn infimal_convolution_gradient_identity() {
    let (f, omega, b) = smooth_pair();
    let h = 1e-5;
    for x in [vec![0.3, -1.2], vec![2.0, 0.5], vec![-1.5, -0.7]] {
        let x = DVector::from_vec(x);
        let (_, u) = infimal_convolution(&f, &omega, &b, &x).unwrap();
        let analytic = omega.grad(&(&x - &b * &u));
        for i in 0..2 {
            let mut e = DVector::zeros(2);
            e[i] = h;
            let fd = (infimal_convolution(&f, &omega, &b, &(&x + &e)).unwrap().0
                - infimal_convolution(&f, &omega, &b, &(&x - &e)).unwrap().0)
                / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6, "{fd} vs {}", analytic[i]);
        }
    }
}

#[test]
fn infimal_convolution_closed_forms() {
    let x = DVector::from_vec(vec![1.0, -2.0]);
    let half = ConvexFn::isotropic(2, 1.0);
    let (value, u) = infimal_convolution(&half, &half, &DMatrix::identity(2, 2), &x).unwrap();
    assert!((value - x.norm_squared() / 4.0).abs() < 1e-14);
    assert!((u - &x / 2.0).norm() < 1e-14);
    let (f, omega, _) = smooth_pair();
    let (value, u) = infimal_convolution(&f, &omega, &DMatrix::zeros(2, 2), &x).unwrap();
    assert!(u.norm() < 1e-12);
    assert!((value - omega.value(&x)).abs() < 1e-14);
}

#[test]
fn composed_curvature_constants() {
    let f = ConvexFn::isotropic(2, 1.0);
    let omega = ConvexFn::isotropic(2, 2.0);
    let b = DMatrix::identity(2, 2);
    let grad = |x: &DVector<f64>| {
        let (_, u) = infimal_convolution(&f, &omega, &b, x).unwrap();
        omega.grad(&(x - &b * u))
    };
    let lo = DVector::from_element(2, -3.0);
    let hi = DVector::from_element(2, 3.0);
    let (mu, ell) = curvature_probe(grad, &lo, &hi, 400, 1);
    assert!(mu >= 2.0 / 3.0 - 1e-6 && ell <= 2.0 + 1e-6, "{mu} {ell}");
    assert!((mu - 2.0 / 3.0).abs() < 1e-6);

    let (f, omega, b) = smooth_pair();
    let nb = b.singular_values().max();
    let predicted = omega.mu() * f.mu() / (f.mu() + nb * nb * omega.mu());
    let grad = |x: &DVector<f64>| {
        let (_, u) = infimal_convolution(&f, &omega, &b, x).unwrap();
        omega.grad(&(x - &b * u))
    };
    let (mu, ell) = curvature_probe(grad, &lo, &hi, 400, 2);
    assert!(mu - predicted >= -1e-6, "{mu} vs {predicted}");
    assert!(omega.ell().unwrap() - ell >= -1e-6, "{ell}");
}

#[test]
fn probe_brackets_the_one_dimensional_hessian() {
    let omega = ConvexFn::separable(DVector::from_element(1, 1.0), 0.1, ScalarTerm::LogOnePlusSq);
    let lo = DVector::from_element(1, -3.0);
    let hi = DVector::from_element(1, 3.0);
    let (mu, ell) = curvature_probe(|x| omega.grad(x), &lo, &hi, 2000, 3);
    // 1 + 0.1 φ'' over [−3, 3]: φ'' ranges over [−1/4, 2].
    assert!((0.975 - 1e-6..0.976).contains(&mu), "{mu}");
    assert!(ell <= 1.2 + 1e-6 && ell > 1.199, "{ell}");
}

#[test]
fn conjugacy_for_quadratics() {
    let f = ConvexFn::quadratic(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]));
    let omega = ConvexFn::quadratic(DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 0.1, 0.0, 1.0, 0.0, 0.1, 0.0, 2.0]));
    let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, -0.2, 0.4]);
    for y in [vec![0.5, -1.0, 2.0], vec![0.0, 0.0, 0.0], vec![-3.0, 1.0, 0.3]] {
        let rep = conjugacy_check(&f, &omega, &b, &DVector::from_vec(y)).unwrap();
        assert!(rep.gap.abs() < 1e-9 * (1.0 + rep.rhs.abs()), "{rep:?}");
    }
}

#[test]
fn action_variance_above_its_bound() {
    let f = ConvexFn::quadratic(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.5]));
    let omega = ConvexFn::isotropic(2, 2.0);
    let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.7]);
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
    let rep = action_variance_check(&f, &omega, &b, &DVector::zeros(2), &sigma, 50_000, 4).unwrap();
    assert!(rep.trace_cov >= rep.bound - 3.0 * rep.std_error, "{rep:?}");
    assert!(rep.bound > 0.0);
}

#[test]
fn passthrough_cases() {
    // Linear g = γx with X ~ N(0, σ²I): Cov g(X) = γ²σ² I exactly.
    let gamma = 1.7;
    let phi = ConvexFn::isotropic(2, gamma);
    let sigma = DMatrix::identity(2, 2) * 0.5;
    let certs = Certificates { gamma, lipschitz: gamma };
    let rep = variance_passthrough_check(&phi, Some(certs), &DVector::zeros(2), &sigma, 40_000, 1).unwrap();
    assert!((rep.bound - gamma * gamma * 0.5).abs() < 1e-12);
    assert!(rep.min_eig >= rep.bound - 3.0 * rep.std_error);

    // Separable anisotropic case.
    let phi = ConvexFn::separable(DVector::from_vec(vec![1.0, 1.0]), 0.1, ScalarTerm::LogCosh);
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
    let certs = Certificates { gamma: 1.0, lipschitz: 1.1 };
    let rep = variance_passthrough_check(&phi, Some(certs), &DVector::zeros(2), &sigma, 40_000, 2).unwrap();
    assert_eq!(rep.bound, 1.0);
    assert!(rep.min_eig >= rep.bound - 3.0 * rep.std_error, "{rep:?}");

    assert!(matches!(
        variance_passthrough_check(&phi, None, &DVector::zeros(2), &sigma, 100, 0),
        Err(Error::CertificateMissing(_))
    ));
    let wrong = Certificates { gamma: 1.5, lipschitz: 2.0 };
    assert!(matches!(
        variance_passthrough_check(&phi, Some(wrong), &DVector::zeros(2), &sigma, 100, 0),
        Err(Error::CertificateMissing(_))
    ));
}
