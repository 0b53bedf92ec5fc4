use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use predpower::bounds::{covariance_power_bound, infimal_convolution, mu_ell_recursion, CostConditioning, CovarianceBound, InputGainBound};
use predpower::convex::ConvexFn;
use predpower::error::{Error, Result};
use predpower::lqr::{feedforward_covariance, prediction_power_closed_form, prediction_power_closed_form_residual, riccati_backward, LtvSystem};
use predpower::predictors::{sample_instance, History, PredictorModel};
use predpower::presets;
use predpower::rollout::{mpc_counterexample_rational, prediction_power_mc, run_policy, PolicyFn};

use crate::report::{Check, Outcome};

/// Reads the disturbance that has not been realized yet.
struct Peek;

impl PolicyFn for Peek {
    fn act(&self, system: &LtvSystem, t: usize, _x: &DVector<f64>, history: &History) -> Result<DVector<f64>> {
        Ok(-(&system.b[t].transpose() * history.disturbance(t)?))
    }
}

type Case = (&'static str, fn(u64) -> Result<(bool, String)>);

const CASES: &[Case] = &[
    ("zero_correlation_has_zero_power", zero_power),
    ("closed_forms_agree", closed_forms_agree),
    ("monte_carlo_matches_closed_form", mc_matches),
    ("binary_example_is_exact", binary_exact),
    ("counterexample_exact_values", counterexample),
    ("recursion_bounds", recursion_bounds),
    ("covariance_bound_equals_closed_form", covariance_bound),
    ("infimal_convolution_closed_form", inf_conv),
    ("future_disturbances_unreachable", leak_probe),
];

fn zero_power(_: u64) -> Result<(bool, String)> {
    let sys = presets::double_integrator(50)?;
    let ric = riccati_backward(&sys)?;
    let model = PredictorModel::affine_gaussian(0.0, DMatrix::identity(2, 2), 50)?;
    let p = prediction_power_closed_form(&sys, &ric, &model)?;
    Ok((p == 0.0, format!("power {p}")))
}

fn closed_forms_agree(_: u64) -> Result<(bool, String)> {
    let sys = presets::double_integrator(30)?;
    let ric = riccati_backward(&sys)?;
    let model = PredictorModel::shifted_affine_gaussian(0.6, presets::rotated_theta(), 30)?;
    let a = prediction_power_closed_form(&sys, &ric, &model)?;
    let b = prediction_power_closed_form_residual(&sys, &ric, &model)?;
    Ok(((a - b).abs() <= 1e-9 * a.abs().max(1.0), format!("{a} vs {b}")))
}

fn mc_matches(seed: u64) -> Result<(bool, String)> {
    let sys = presets::double_integrator(20)?;
    let ric = riccati_backward(&sys)?;
    let model = PredictorModel::affine_gaussian(0.5, DMatrix::identity(2, 2), 20)?;
    let cf = prediction_power_closed_form(&sys, &ric, &model)?;
    let mc = prediction_power_mc(&sys, &ric, &model, 2000, seed)?;
    let ok = (mc.estimate - cf).abs() <= 3.0 * mc.std_error;
    Ok((ok, format!("{} ± {} vs {cf}", mc.estimate, mc.std_error)))
}

fn binary_exact(seed: u64) -> Result<(bool, String)> {
    let sys = presets::binary_example(10)?;
    let ric = riccati_backward(&sys)?;
    let model = PredictorModel::binary_perfect(1, 10)?;
    let cf = prediction_power_closed_form(&sys, &ric, &model)?;
    let mc = prediction_power_mc(&sys, &ric, &model, 200, seed)?;
    let ok = cf == 10.0 && mc.estimate == 10.0 && mc.std_error == 0.0;
    Ok((ok, format!("closed form {cf}, Monte Carlo {} ± {}", mc.estimate, mc.std_error)))
}

fn counterexample(_: u64) -> Result<(bool, String)> {
    let c = mpc_counterexample_rational(Ratio::new(1, 10))?;
    let ok = c.mpc == Ratio::new(19, 60) && c.alternative == Ratio::new(1, 10) && c.threshold == Ratio::new(2, 9);
    Ok((ok, format!("MPC {}, alternative {}, threshold {}", c.mpc, c.alternative, c.threshold)))
}

fn recursion_bounds(_: u64) -> Result<(bool, String)> {
    let cond = CostConditioning { mu_x: 0.5, ell_x: 3.0, mu_u: 1.0, ell_u: 2.0, mu_a: 0.2, ell_a: 0.8, mu_b: 0.5, ell_b: 1.5 };
    let me = mu_ell_recursion(&cond, 200, InputGainBound::Upper)?;
    let ok = me.mu.iter().all(|&m| m >= cond.mu_x) && me.ell.iter().all(|&l| l <= me.ell_ceiling);
    Ok((ok, format!("ℓ_0 = {} ≤ {}", me.ell[0], me.ell_ceiling)))
}

fn covariance_bound(_: u64) -> Result<(bool, String)> {
    let sys = presets::double_integrator(25)?;
    let ric = riccati_backward(&sys)?;
    let model = PredictorModel::affine_gaussian(0.5, DMatrix::identity(2, 2), 25)?;
    let sigma = (0..25).map(|t| feedforward_covariance(&sys, &ric, &model, t)).collect::<Result<Vec<_>>>()?;
    let bound = covariance_power_bound(&ric.m, &CovarianceBound::Matrices(sigma))?;
    let cf = prediction_power_closed_form(&sys, &ric, &model)?;
    Ok(((bound - cf).abs() <= 1e-10 * cf, format!("{bound} vs {cf}")))
}

fn inf_conv(_: u64) -> Result<(bool, String)> {
    let half = ConvexFn::isotropic(2, 1.0);
    let x = DVector::from_vec(vec![1.0, -2.0]);
    let (value, u) = infimal_convolution(&half, &half, &DMatrix::identity(2, 2), &x)?;
    let ok = (value - x.norm_squared() / 4.0).abs() < 1e-12 && (&u - &x / 2.0).norm() < 1e-12;
    Ok((ok, format!("value {value}, u = [{}, {}]", u[0], u[1])))
}

fn leak_probe(seed: u64) -> Result<(bool, String)> {
    let sys = presets::binary_example(5)?;
    let model = PredictorModel::binary_perfect(1, 5)?;
    let inst = sample_instance(&model, seed);
    match run_policy(&sys, &Peek, &inst) {
        Err(Error::InformationLeak { t, requested }) => Ok((true, format!("blocked request for w_{requested} at t = {t}"))),
        Err(e) => Ok((false, format!("unexpected error: {e}"))),
        Ok(_) => Ok((false, "policy read a future disturbance".into())),
    }
}

/// Runs every invariant; errors count as failures.
pub fn selftest_cases(seed: u64) -> Vec<Check> {
    CASES
        .iter()
        .map(|(name, case)| match case(seed) {
            Ok((pass, detail)) => Check::new(*name, pass, detail),
            Err(e) => Check::new(*name, false, format!("error: {e}")),
        })
        .collect()
}

pub fn run(seed: u64) -> crate::error::CliResult<Outcome> {
    let checks = selftest_cases(seed);
    let mut out = Outcome::default();
    let passed = checks.iter().filter(|c| c.pass).count();
    out.metric("passed", passed as f64);
    out.metric("total", checks.len() as f64);
    out.checks = checks;
    Ok(out)
}
