//! Online tuning of linear predictive policies `u_t = −K x_t + Υ_t v_t`.
//!
//! The gradient of each stage cost with respect to `Υ` is propagated through
//! the closed loop by a forward sensitivity state `S_t = ∂x_t/∂Υ`, treating
//! the current `Υ` as if it had been used throughout.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{discrete_lyapunov, trace_product};
use crate::lqr::LtvSystem;
use crate::predictors::{PredictorKind, PredictorModel};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyClassSpec {
    /// Fixed feedback gain `K` (`m×n`).
    pub k: DMatrix<f64>,
    /// Initial prediction map `Υ_0` (`m×d`).
    pub upsilon0: DMatrix<f64>,
    /// Learning rate `η_t = η₀ (1 + t/c)^{−β}`.
    pub eta0: f64,
    pub c: f64,
    pub beta: f64,
    /// Frobenius-norm ceiling on `Υ_t`.
    pub bound: f64,
    pub record_every: usize,
}

impl PolicyClassSpec {
    pub fn new(k: DMatrix<f64>, d: usize) -> Self {
        let m = k.nrows();
        PolicyClassSpec {
            k,
            upsilon0: DMatrix::zeros(m, d),
            eta0: 0.003,
            c: 1000.0,
            beta: 0.5,
            bound: 1e3,
            record_every: 100,
        }
    }

    pub fn learning_rate(&self, t: usize) -> f64 {
        self.eta0 * (1.0 + t as f64 / self.c).powf(-self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRunRecord {
    pub times: Vec<usize>,
    pub cumulative_cost: Vec<f64>,
    pub baseline_cumulative_cost: Vec<f64>,
    /// `(baseline − tuned cumulative cost) / (t + 1)`.
    pub improvement: Vec<f64>,
    /// Row-major entries of `Υ_t` after the update at each recorded time.
    pub upsilon: Vec<Vec<f64>>,
}

impl OnlineRunRecord {
    /// Mean per-step improvement over the last `fraction` of the run, from
    /// the recorded cumulative costs.
    pub fn final_window_improvement(&self, fraction: f64) -> f64 {
        let last = self.times.len() - 1;
        let end = self.times[last];
        let cutoff = end as f64 - fraction * (end + 1) as f64;
        let start = self.times.iter().rposition(|&t| t as f64 <= cutoff).unwrap_or(0);
        let gain = |i: usize| self.baseline_cumulative_cost[i] - self.cumulative_cost[i];
        (gain(last) - gain(start)) / (end - self.times[start]) as f64
    }
}

fn time_invariant_parts(system: &LtvSystem) -> Result<()> {
    if !system.is_time_invariant() {
        return Err(Error::InvalidSystem("online tuning needs a time-invariant system".into()));
    }
    Ok(())
}

/// Stage cost of `(x, u)` and its gradient with respect to `Υ`, given the
/// sensitivity `S = ∂x/∂vec(Υ)` (`n × md`, column `i·d + j` for `Υ_ij`).
fn stage_and_gradient(
    system: &LtvSystem,
    k: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    s: &DMatrix<f64>,
    v: &DVector<f64>,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let (q, r) = (&system.q[0], &system.r[0]);
    let (m, d) = (u.len(), v.len());
    let qx = q * x * 2.0;
    let ru = r * u * 2.0;
    // ∂u/∂Υ_ij = −K S_ij + e_i v_j.
    let mut du = -(k * s);
    for i in 0..m {
        for j in 0..d {
            du[(i, i * d + j)] += v[j];
        }
    }
    let g = s.transpose() * qx + du.transpose() * ru;
    let grad = DMatrix::from_fn(m, d, |i, j| g[i * d + j]);
    let cost = x.dot(&(q * x)) + u.dot(&(r * u));
    (cost, grad, du)
}

/// One online run on instance `index` of `model` under `seed`, with the
/// no-prediction policy rolled on the same disturbances.
pub fn online_optimize_indexed(
    system: &LtvSystem,
    model: &PredictorModel,
    spec: &PolicyClassSpec,
    horizon: usize,
    seed: u64,
    index: u64,
) -> Result<OnlineRunRecord> {
    time_invariant_parts(system)?;
    let (a, b) = (&system.a[0], &system.b[0]);
    let (n, m, d) = (system.n(), system.m(), model.d());
    if spec.k.shape() != (m, n) || spec.upsilon0.shape() != (m, d) || model.n() != n {
        return Err(Error::DimensionMismatch("policy class does not match system and predictor".into()));
    }
    if spec.record_every == 0 {
        return Err(Error::InvalidArgument("record_every must be positive".into()));
    }
    let mut upsilon = spec.upsilon0.clone();
    let mut x = system.x0.clone();
    let mut xb = system.x0.clone();
    let mut s = DMatrix::zeros(n, m * d);
    let (mut cum, mut cum_base) = (0.0, 0.0);
    let mut rec = OnlineRunRecord {
        times: Vec::new(),
        cumulative_cost: Vec::new(),
        baseline_cumulative_cost: Vec::new(),
        improvement: Vec::new(),
        upsilon: Vec::new(),
    };
    for t in 0..horizon {
        let w = model.disturbance_at(seed, index, t);
        let v = model.prediction_at(seed, index, t as i64);
        let u = &upsilon * &v - &spec.k * &x;
        let (cost, grad, du) = stage_and_gradient(system, &spec.k, &x, &u, &s, &v);
        let ub = -(&spec.k * &xb);
        cum += cost;
        cum_base += xb.dot(&(&system.q[0] * &xb)) + ub.dot(&(&system.r[0] * &ub));

        s = a * &s + b * du;
        x = a * &x + b * &u + &w;
        xb = a * &xb + b * &ub + &w;

        upsilon -= grad * spec.learning_rate(t);
        let norm = upsilon.norm();
        if !norm.is_finite() || norm > spec.bound {
            return Err(Error::Divergence { t, norm, bound: spec.bound });
        }
        if (t + 1) % spec.record_every == 0 || t + 1 == horizon {
            rec.times.push(t);
            rec.cumulative_cost.push(cum);
            rec.baseline_cumulative_cost.push(cum_base);
            rec.improvement.push((cum_base - cum) / (t + 1) as f64);
            rec.upsilon.push(upsilon.transpose().iter().copied().collect());
        }
    }
    Ok(rec)
}

pub fn online_optimize(
    system: &LtvSystem,
    model: &PredictorModel,
    spec: &PolicyClassSpec,
    horizon: usize,
    seed: u64,
) -> Result<OnlineRunRecord> {
    online_optimize_indexed(system, model, spec, horizon, seed, 0)
}

/// Independent replicates `0..reps`, in parallel.
pub fn run_replicates(
    system: &LtvSystem,
    model: &PredictorModel,
    spec: &PolicyClassSpec,
    horizon: usize,
    seed: u64,
    reps: usize,
) -> Result<Vec<OnlineRunRecord>> {
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| online_optimize_indexed(system, model, spec, horizon, seed, rep))
        .collect()
}

/// Cost of the final step of a `k`-step rollout with a fixed `Υ`, and its
/// gradient from the sensitivity recursion.
pub fn window_cost_gradient(
    system: &LtvSystem,
    k: &DMatrix<f64>,
    upsilon: &DMatrix<f64>,
    x0: &DVector<f64>,
    v: &[DVector<f64>],
    w: &[DVector<f64>],
) -> (f64, DMatrix<f64>) {
    let (a, b) = (&system.a[0], &system.b[0]);
    let (m, d) = upsilon.shape();
    let mut x = x0.clone();
    let mut s = DMatrix::zeros(x0.len(), m * d);
    let last = v.len() - 1;
    for t in 0..last {
        let u = upsilon * &v[t] - k * &x;
        let (_, _, du) = stage_and_gradient(system, k, &x, &u, &s, &v[t]);
        s = a * &s + b * du;
        x = a * &x + b * &u + &w[t];
    }
    let u = upsilon * &v[last] - k * &x;
    let (cost, grad, _) = stage_and_gradient(system, k, &x, &u, &s, &v[last]);
    (cost, grad)
}

/// Long-run average stage cost of the fixed policy `u = −Kx + Υv`.
pub fn stationary_cost(
    system: &LtvSystem,
    k: &DMatrix<f64>,
    upsilon: &DMatrix<f64>,
    model: &PredictorModel,
) -> Result<f64> {
    time_invariant_parts(system)?;
    let (a, b, q, r) = (&system.a[0], &system.b[0], &system.q[0], &system.r[0]);
    let n = system.n();
    let l = a - b * k;
    let eye = DMatrix::<f64>::identity(n, n);
    let weight = q + k.transpose() * r * k;
    let unstable = || Error::InvalidSystem("closed loop is not stable".into());
    match model.kind() {
        PredictorKind::Baseline => {
            let sx = discrete_lyapunov(&l, &eye).ok_or_else(unstable)?;
            Ok(trace_product(&weight, &sx))
        }
        PredictorKind::AffineGaussian { rho, theta } => {
            let d = theta.nrows();
            let by = b * upsilon;
            let g = DMatrix::from_fn(n, n + d, |i, j| {
                if j < n {
                    eye[(i, j)] + (&by * theta * *rho)[(i, j)]
                } else {
                    by[(i, j - n)]
                }
            });
            let mut cov = DMatrix::zeros(n + d, n + d);
            cov.view_mut((0, 0), (n, n)).fill_with_identity();
            let noise = DMatrix::identity(d, d) - theta * theta.transpose() * (rho * rho);
            cov.view_mut((n, n), (d, d)).copy_from(&noise);
            let sx = discrete_lyapunov(&l, &(&g * cov * g.transpose())).ok_or_else(unstable)?;
            Ok(trace_product(&weight, &sx) + trace_product(&(upsilon.transpose() * r * upsilon), &DMatrix::identity(d, d)))
        }
        PredictorKind::ShiftedAffineGaussian { rho, theta } => {
            // z_t = (x_t, v_{t−1}); w_t = ρθᵀv_{t−1} + η_t.
            let d = theta.nrows();
            let mut az = DMatrix::zeros(n + d, n + d);
            az.view_mut((0, 0), (n, n)).copy_from(&l);
            az.view_mut((0, n), (n, d)).copy_from(&(theta.transpose() * *rho));
            let mut gz = DMatrix::zeros(n + d, d + n);
            gz.view_mut((0, 0), (n, d)).copy_from(&(b * upsilon));
            gz.view_mut((0, d), (n, n)).fill_with_identity();
            gz.view_mut((n, 0), (d, d)).fill_with_identity();
            let mut cov = DMatrix::zeros(d + n, d + n);
            cov.view_mut((0, 0), (d, d)).fill_with_identity();
            let eta = DMatrix::identity(n, n) - theta.transpose() * theta * (rho * rho);
            cov.view_mut((d, d), (n, n)).copy_from(&eta);
            let sz = discrete_lyapunov(&az, &(&gz * cov * gz.transpose())).ok_or_else(unstable)?;
            let sx = sz.view((0, 0), (n, n)).into_owned();
            Ok(trace_product(&weight, &sx) + trace_product(&(upsilon.transpose() * r * upsilon), &DMatrix::identity(d, d)))
        }
        _ => Err(Error::UnsupportedPredictor(format!("stationary cost for {}", model.label()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InClassOptimum {
    pub upsilon: DMatrix<f64>,
    /// Per-step improvement over `Υ = 0`.
    pub improvement: f64,
}

/// Best fixed `Υ` by Newton's method on the exact stationary cost, which is
/// quadratic in `Υ`; derivatives by central differences.
pub fn optimal_in_class_improvement(
    system: &LtvSystem,
    model: &PredictorModel,
    spec: &PolicyClassSpec,
) -> Result<InClassOptimum> {
    let (m, d) = spec.upsilon0.shape();
    let dim = m * d;
    let base = stationary_cost(system, &spec.k, &DMatrix::zeros(m, d), model)?;
    let f = |p: &DVector<f64>| stationary_cost(system, &spec.k, &DMatrix::from_row_slice(m, d, p.as_slice()), model);
    let h = 1e-3;
    let mut p = DVector::zeros(dim);
    let mut residual = f64::INFINITY;
    for _ in 0..20 {
        let f0 = f(&p)?;
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let ei = DVector::from_fn(dim, |k, _| if k == i { h } else { 0.0 });
            let fp = f(&(&p + &ei))?;
            let fm = f(&(&p - &ei))?;
            grad[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in 0..i {
                let ej = DVector::from_fn(dim, |k, _| if k == j { h } else { 0.0 });
                let fpp = f(&(&p + &ei + &ej))?;
                let fpm = f(&(&p + &ei - &ej))?;
                let fmp = f(&(&p - &ei + &ej))?;
                let fmm = f(&(&p - &ei - &ej))?;
                let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        residual = grad.norm();
        if residual < 1e-10 * (1.0 + base.abs()) {
            break;
        }
        let step = hess
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or(Error::NoConvergence { iterations: 0, residual })?;
        p -= step;
    }
    if residual.is_nan() || residual > 1e-6 * (1.0 + base.abs()) {
        return Err(Error::NoConvergence { iterations: 20, residual });
    }
    let upsilon = DMatrix::from_row_slice(m, d, p.as_slice());
    let improvement = base - stationary_cost(system, &spec.k, &upsilon, model)?;
    Ok(InClassOptimum { upsilon, improvement })
}
