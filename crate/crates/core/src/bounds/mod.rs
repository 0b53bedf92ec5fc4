//! Lower bounds on prediction power for convex costs, and numerical checks of
//! the conditions and curvature lemmas behind them.
//!
//! Curvature constants follow the Hessian convention: `μ I ⪯ ∇²h ⪯ ℓ I`, so
//! `h(x) = x²` has `μ = ℓ = 2`.

mod curvature;
mod dp;

pub use curvature::{
    conjugacy_check, curvature_probe, infimal_convolution, action_variance_check, variance_passthrough_check,
    Certificates, ConjugacyReport, ActionVarianceReport, PassthroughReport,
};
pub use dp::{
    growth_condition_check, variance_condition_check, dp_power_mc, gauss_hermite, CheckBudget, GrowthConditionReport,
    VarianceConditionReport, DpPower, ScalarDp, ScalarLaw, ScalarProblem,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, trace_product};

/// Curvature and conditioning constants of a system with separable costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConditioning {
    pub mu_x: f64,
    pub ell_x: f64,
    pub mu_u: f64,
    pub ell_u: f64,
    pub mu_a: f64,
    pub ell_a: f64,
    pub mu_b: f64,
    pub ell_b: f64,
}

/// What stands for `b²` in the strong-convexity recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputGainBound {
    #[default]
    Upper,
    Lower,
}

impl CostConditioning {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("x", self.mu_x, self.ell_x),
            ("u", self.mu_u, self.ell_u),
            ("A", self.mu_a, self.ell_a),
            ("B", self.mu_b, self.ell_b),
        ];
        for (name, mu, ell) in pairs {
            if !(mu >= 0.0 && mu <= ell && ell.is_finite()) {
                return Err(Error::InvalidArgument(format!("need 0 ≤ μ_{name} ≤ ℓ_{name}, got {mu} and {ell}")));
            }
        }
        if self.ell_a >= 1.0 {
            return Err(Error::InvalidArgument(format!("ℓ_A = {} must be below 1", self.ell_a)));
        }
        Ok(())
    }

    /// Constants of a time-invariant scalar system `x⁺ = a x + b u + w` with
    /// the given cost curvatures.
    pub fn scalar(a: f64, b: f64, mu_x: f64, ell_x: f64, mu_u: f64, ell_u: f64) -> Self {
        CostConditioning {
            mu_x,
            ell_x,
            mu_u,
            ell_u,
            mu_a: a * a,
            ell_a: a * a,
            mu_b: b * b,
            ell_b: b * b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuEll {
    /// `μ_0, …, μ_T`.
    pub mu: Vec<f64>,
    pub ell: Vec<f64>,
    pub mu_floor: f64,
    pub ell_ceiling: f64,
}

/// Backward recursion for the curvature of the expected cost-to-go.
pub fn mu_ell_recursion(cond: &CostConditioning, horizon: usize, b2: InputGainBound) -> Result<MuEll> {
    cond.validate()?;
    let b_sq = match b2 {
        InputGainBound::Upper => cond.ell_b,
        InputGainBound::Lower => cond.mu_b,
    };
    let ell_ceiling = cond.ell_x / (1.0 - cond.ell_a);
    let mut mu = vec![0.0; horizon + 1];
    let mut ell = vec![0.0; horizon + 1];
    mu[horizon] = cond.mu_x;
    ell[horizon] = cond.ell_x;
    for t in (0..horizon).rev() {
        let denom = cond.mu_u + b_sq * mu[t + 1];
        let inner = if denom > 0.0 { cond.mu_u * mu[t + 1] / denom } else { 0.0 };
        mu[t] = cond.mu_x + cond.mu_a * inner;
        // Rounding can push the partial sums a few ulps past the limit.
        ell[t] = (cond.ell_x + cond.ell_a * ell[t + 1]).min(ell_ceiling);
    }
    Ok(MuEll { mu, ell, mu_floor: cond.mu_x, ell_ceiling })
}

/// `σ_t = n λ_t μ_{t+1}² μ_B / (2 (ℓ_u + ℓ_{t+1} √ℓ_B)²)`.
pub fn sigma_lower(cond: &CostConditioning, lambda: f64, mu_next: f64, ell_next: f64, n: usize) -> f64 {
    let denom = 2.0 * (cond.ell_u + ell_next * cond.ell_b.sqrt()).powi(2);
    if denom == 0.0 {
        return 0.0;
    }
    n as f64 * lambda * mu_next * mu_next * cond.mu_b / denom
}

/// Per-step covariance lower bounds in either matrix or trace form.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceBound {
    Matrices(Vec<DMatrix<f64>>),
    Traces(Vec<f64>),
}

/// `Σ_t Tr{M_t Σ_t}`, or `Σ_t μ_min(M_t) σ_t` with trace bounds.
pub fn covariance_power_bound(m: &[DMatrix<f64>], cov: &CovarianceBound) -> Result<f64> {
    let len = match cov {
        CovarianceBound::Matrices(s) => s.len(),
        CovarianceBound::Traces(s) => s.len(),
    };
    if len != m.len() {
        return Err(Error::ShapeMismatch(format!("{} growth matrices vs {len} covariance bounds", m.len())));
    }
    match cov {
        CovarianceBound::Matrices(s) => m
            .iter()
            .zip(s)
            .map(|(mt, st)| {
                if mt.shape() != st.shape() {
                    return Err(Error::ShapeMismatch("M_t and Σ_t differ in shape".into()));
                }
                Ok(trace_product(mt, st))
            })
            .sum(),
        CovarianceBound::Traces(s) => Ok(m.iter().zip(s).map(|(mt, st)| min_eigenvalue(mt).max(0.0) * st).sum()),
    }
}

/// `Σ_t μ_u σ_t` with `σ_t` from the curvature recursion.
pub fn curvature_power_bound(cond: &CostConditioning, lambda: &[f64], n: usize, b2: InputGainBound) -> Result<f64> {
    let horizon = lambda.len();
    let me = mu_ell_recursion(cond, horizon, b2)?;
    Ok((0..horizon)
        .map(|t| cond.mu_u * sigma_lower(cond, lambda[t], me.mu[t + 1], me.ell[t + 1], n))
        .sum())
}
