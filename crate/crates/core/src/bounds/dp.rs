//! Dynamic programming for scalar systems `x⁺ = a x + b u + w` with
//! independent `(w_t, v_t)` pairs, on a grid with Gauss–Hermite quadrature.
//!
//! Given `v`, the disturbance splits as `w = m v + r` with `r` independent of
//! `v`, so every conditional expectation of the next cost-to-go is a function
//! of `y = a x + m v` alone:
//!
//! ```text
//! G_{t+1}(y) = E_r J_{t+1}(y + r)
//! Φ_t(y)     = min_u h^u(u) + G_{t+1}(y + b u),   φ_t(y) = argmin
//! J_t(x)     = h^x(x) + E_v Φ_t(a x + m v)
//! ```

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CostConditioning;
use crate::convex::{ConvexFn, ScalarTerm};
use crate::error::{Error, Result};
use crate::rng;

const GRID_HALF_WIDTH: f64 = 10.0;
const GRID_POINTS: usize = 2001;
const MAX_CHECK_HORIZON: usize = 4;
const MAX_OUTER: usize = 1000;
const MAX_INNER: usize = 10_000;

/// Nodes and weights of the `k`-point rule for `E f(Z)`, `Z ~ N(0,1)`.
pub fn gauss_hermite(k: usize) -> Vec<(f64, f64)> {
    if k == 1 {
        return vec![(0.0, 1.0)];
    }
    let jacobi = DMatrix::from_fn(k, k, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let mut out: Vec<(f64, f64)> =
        (0..k).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = out.iter().map(|p| p.1).sum();
    out.iter_mut().for_each(|p| p.1 /= total);
    out
}

fn eval1(f: &ConvexFn, x: f64) -> f64 {
    f.value(&DVector::from_element(1, x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarProblem {
    pub a: f64,
    pub b: f64,
    pub horizon: usize,
    pub state: ConvexFn,
    pub input: ConvexFn,
    pub terminal: ConvexFn,
}

impl ScalarProblem {
    /// Costs `q x²`, `r u²` and terminal `p x²`.
    pub fn lqr(a: f64, b: f64, q: f64, r: f64, p: f64, horizon: usize) -> Self {
        let quad = |c: f64| ConvexFn::quadratic(DMatrix::from_element(1, 1, 2.0 * c));
        ScalarProblem { a, b, horizon, state: quad(q), input: quad(r), terminal: quad(p) }
    }

    /// `h^x = x²/2 + 0.1 log(1+x²)`, `h^u = u²/2`, `a = 0.5`, `b = 1`, `T = 4`.
    pub fn nonquadratic_toy() -> Self {
        let hx = ConvexFn::separable(DVector::from_element(1, 1.0), 0.1, ScalarTerm::LogOnePlusSq);
        ScalarProblem {
            a: 0.5,
            b: 1.0,
            horizon: 4,
            state: hx.clone(),
            input: ConvexFn::isotropic(1, 1.0),
            terminal: hx,
        }
    }

    /// Constants from the cost certificates; `None` without a smoothness bound.
    pub fn conditioning(&self) -> Option<CostConditioning> {
        let mu_x = self.state.mu().min(self.terminal.mu());
        let ell_x = self.state.ell()?.max(self.terminal.ell()?);
        Some(CostConditioning::scalar(self.a, self.b, mu_x, ell_x, self.input.mu(), self.input.ell()?))
    }
}

/// Joint law of one `(w, v)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarLaw {
    /// `w ~ N(0,1)`, `v = ρ w + √(1−ρ²) e`.
    Gaussian { rho: f64 },
    /// `w` uniform on `{±1}`, `v = w`.
    BinaryPerfect,
    /// `w = v = 0`.
    Deterministic,
}

struct Split {
    gain: f64,
    v_nodes: Vec<(f64, f64)>,
    residual: Vec<(f64, f64)>,
}

impl ScalarLaw {
    fn split(&self, baseline: bool, nodes: usize) -> Split {
        let gh = gauss_hermite(nodes);
        let point = vec![(0.0, 1.0)];
        let signs = vec![(-1.0, 0.5), (1.0, 0.5)];
        match (*self, baseline) {
            (ScalarLaw::Gaussian { .. }, true) => Split { gain: 0.0, v_nodes: point, residual: gh },
            (ScalarLaw::Gaussian { rho }, false) => {
                let s = (1.0 - rho * rho).max(0.0).sqrt();
                let residual = if s == 0.0 { point } else { gh.iter().map(|&(z, w)| (s * z, w)).collect() };
                Split { gain: rho, v_nodes: gh, residual }
            }
            (ScalarLaw::BinaryPerfect, true) => Split { gain: 0.0, v_nodes: point, residual: signs },
            (ScalarLaw::BinaryPerfect, false) => Split { gain: 1.0, v_nodes: signs, residual: point },
            (ScalarLaw::Deterministic, _) => Split { gain: 0.0, v_nodes: point.clone(), residual: point },
        }
    }

    /// One draw of `(w, v)`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        match *self {
            ScalarLaw::Gaussian { rho } => {
                let w: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                (w, rho * w + (1.0 - rho * rho).max(0.0).sqrt() * e)
            }
            ScalarLaw::BinaryPerfect => {
                let w = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (w, w)
            }
            ScalarLaw::Deterministic => (0.0, 0.0),
        }
    }

    /// `Cov(W) − Cov(W | V)`.
    pub fn explained_variance(&self) -> f64 {
        match *self {
            ScalarLaw::Gaussian { rho } => rho * rho,
            ScalarLaw::BinaryPerfect => 1.0,
            ScalarLaw::Deterministic => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Grid {
    lo: f64,
    step: f64,
    len: usize,
}

impl Grid {
    fn point(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }

    /// Catmull–Rom cubic inside the grid, exact for quadratics; linear in the
    /// end cells and beyond them.
    fn interp(&self, table: &[f64], y: f64) -> f64 {
        let pos = (y - self.lo) / self.step;
        let i = (pos.floor().max(0.0) as usize).min(self.len - 2);
        let s = pos - i as f64;
        if i == 0 || i + 2 >= self.len {
            return table[i] + s * (table[i + 1] - table[i]);
        }
        let (p0, p1, p2, p3) = (table[i - 1], table[i], table[i + 1], table[i + 2]);
        p1 + 0.5
            * s
            * ((p2 - p0) + s * ((2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) + s * (3.0 * (p1 - p2) + p3 - p0)))
    }
}

fn golden<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Solved cost-to-go tables for one information structure.
#[derive(Debug, Clone)]
pub struct ScalarDp {
    pub problem: ScalarProblem,
    grid: Grid,
    gain: f64,
    v_nodes: Vec<(f64, f64)>,
    /// `J_0, …, J_T`.
    j: Vec<Vec<f64>>,
    /// `G_{t+1}` for `t < T`.
    g: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    phi_val: Vec<Vec<f64>>,
}

impl ScalarDp {
    /// Tables for the predictor's information (`baseline = false`) or for
    /// disturbances alone.
    pub fn solve(problem: &ScalarProblem, law: &ScalarLaw, baseline: bool, nodes: usize) -> Self {
        let split = law.split(baseline, nodes);
        let grid = Grid { lo: -GRID_HALF_WIDTH, step: 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64, len: GRID_POINTS };
        let horizon = problem.horizon;
        let bound = if problem.b != 0.0 { 2.0 * GRID_HALF_WIDTH / problem.b.abs() + 1.0 } else { GRID_HALF_WIDTH };
        let mut j = vec![Vec::new(); horizon + 1];
        let mut g = vec![Vec::new(); horizon];
        let mut phi = vec![Vec::new(); horizon];
        let mut phi_val = vec![Vec::new(); horizon];
        j[horizon] = (0..grid.len).map(|i| eval1(&problem.terminal, grid.point(i))).collect();
        for t in (0..horizon).rev() {
            let next = &j[t + 1];
            let gt: Vec<f64> = (0..grid.len)
                .map(|i| split.residual.iter().map(|&(r, w)| w * grid.interp(next, grid.point(i) + r)).sum())
                .collect();
            let (pt, pv): (Vec<f64>, Vec<f64>) = (0..grid.len)
                .into_par_iter()
                .map(|i| {
                    let y = grid.point(i);
                    golden(|u| eval1(&problem.input, u) + grid.interp(&gt, y + problem.b * u), -bound, bound, 1e-10)
                })
                .unzip();
            j[t] = (0..grid.len)
                .map(|i| {
                    let x = grid.point(i);
                    eval1(&problem.state, x)
                        + split
                            .v_nodes
                            .iter()
                            .map(|&(v, w)| w * grid.interp(&pv, problem.a * x + split.gain * v))
                            .sum::<f64>()
                })
                .collect();
            g[t] = gt;
            phi[t] = pt;
            phi_val[t] = pv;
        }
        ScalarDp { problem: problem.clone(), grid, gain: split.gain, v_nodes: split.v_nodes, j, g, phi, phi_val }
    }

    fn y(&self, x: f64, v: f64) -> f64 {
        self.problem.a * x + self.gain * v
    }

    pub fn policy(&self, t: usize, x: f64, v: f64) -> f64 {
        self.grid.interp(&self.phi[t], self.y(x, v))
    }

    /// `E[Q_t(x, u) | v]`.
    pub fn q_value(&self, t: usize, x: f64, u: f64, v: f64) -> f64 {
        eval1(&self.problem.state, x)
            + eval1(&self.problem.input, u)
            + self.grid.interp(&self.g[t], self.y(x, v) + self.problem.b * u)
    }

    /// `E[C_t(x) | v]`.
    pub fn cost_to_go(&self, t: usize, x: f64, v: f64) -> f64 {
        eval1(&self.problem.state, x) + self.grid.interp(&self.phi_val[t], self.y(x, v))
    }

    /// `E[C_t(x)]` before `v_t` is seen.
    pub fn expected_cost_to_go(&self, t: usize, x: f64) -> f64 {
        self.grid.interp(&self.j[t], x)
    }

    /// Mean and variance of `π_t(x, V)` over the prediction's marginal.
    pub fn action_moments(&self, t: usize, x: f64) -> (f64, f64) {
        let mean: f64 = self.v_nodes.iter().map(|&(v, w)| w * self.policy(t, x, v)).sum();
        let second: f64 = self.v_nodes.iter().map(|&(v, w)| w * self.policy(t, x, v).powi(2)).sum();
        (mean, (second - mean * mean).max(0.0))
    }

    fn rollout(&self, w: &[f64], v: &[f64]) -> f64 {
        let p = &self.problem;
        let mut x = 0.0;
        let mut total = 0.0;
        for t in 0..p.horizon {
            let u = self.policy(t, x, v[t]);
            total += eval1(&p.state, x) + eval1(&p.input, u);
            x = p.a * x + p.b * u + w[t];
        }
        total + eval1(&p.terminal, x)
    }
}

/// Sample budget of the condition checkers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckBudget {
    /// Sampled probe points or states.
    pub outer: usize,
    /// Quadrature nodes per conditional expectation.
    pub inner: usize,
    pub seed: u64,
}

impl Default for CheckBudget {
    fn default() -> Self {
        CheckBudget { outer: 1000, inner: 40, seed: 0 }
    }
}

fn check_budget(problem: &ScalarProblem, budget: &CheckBudget, t: usize) -> Result<()> {
    if problem.horizon > MAX_CHECK_HORIZON {
        return Err(Error::BudgetExceeded(format!(
            "horizon {} above {MAX_CHECK_HORIZON}",
            problem.horizon
        )));
    }
    if budget.outer > MAX_OUTER || budget.inner > MAX_INNER || budget.outer < 2 || budget.inner == 0 {
        return Err(Error::BudgetExceeded(format!(
            "outer {} (max {MAX_OUTER}) and inner {} (max {MAX_INNER}) samples",
            budget.outer, budget.inner
        )));
    }
    if t >= problem.horizon {
        return Err(Error::UnsupportedTarget { target: t, horizon: problem.horizon });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthConditionReport {
    /// Largest `M` with `E[Q − C | I_t] ≥ M (u − π)²` on every probe.
    pub m_candidate: f64,
    /// Smallest observed `E[Q − C | I_t]`; negative values are violations.
    pub min_gap: f64,
    pub probes: usize,
}

/// Quadratic growth of the expected Q function around the optimal action.
pub fn growth_condition_check(problem: &ScalarProblem, law: &ScalarLaw, t: usize, budget: &CheckBudget) -> Result<GrowthConditionReport> {
    check_budget(problem, budget, t)?;
    let dp = ScalarDp::solve(problem, law, false, budget.inner);
    let mut rng = rng::aux(budget.seed, t as u64);
    let mut m_candidate = f64::INFINITY;
    let mut min_gap = f64::INFINITY;
    for _ in 0..budget.outer {
        let x = rng.random_range(-2.0..2.0);
        let (_, v) = law.sample(&mut rng);
        let pi = dp.policy(t, x, v);
        let delta: f64 = rng.random_range(0.25..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let gap = dp.q_value(t, x, pi + delta, v) - dp.q_value(t, x, pi, v);
        min_gap = min_gap.min(gap);
        m_candidate = m_candidate.min(gap / (delta * delta));
    }
    Ok(GrowthConditionReport { m_candidate: m_candidate.max(0.0), min_gap, probes: budget.outer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceConditionReport {
    /// Mean over baseline states of `Var(π_t(X, V) | X)`.
    pub sigma_candidate: f64,
    pub std_error: f64,
    pub states: usize,
}

/// Spread of the optimal action that the baseline information cannot
/// explain, at states visited by the baseline policy.
pub fn variance_condition_check(problem: &ScalarProblem, law: &ScalarLaw, t: usize, budget: &CheckBudget) -> Result<VarianceConditionReport> {
    check_budget(problem, budget, t)?;
    let dp = ScalarDp::solve(problem, law, false, budget.inner);
    let base = ScalarDp::solve(problem, law, true, budget.inner);
    let vars: Vec<f64> = (0..budget.outer as u64)
        .map(|i| {
            let mut x = 0.0;
            for tau in 0..t {
                let mut r = rng::stream(budget.seed, i, tau as u64);
                let (w, _) = law.sample(&mut r);
                let u = base.policy(tau, x, 0.0);
                x = problem.a * x + problem.b * u + w;
            }
            dp.action_moments(t, x).1
        })
        .collect();
    let k = vars.len() as f64;
    let mean = vars.iter().sum::<f64>() / k;
    let var = vars.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(VarianceConditionReport { sigma_candidate: mean.max(0.0), std_error: (var / k).sqrt(), states: vars.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpPower {
    pub estimate: f64,
    pub std_error: f64,
    pub baseline_mean: f64,
    pub predictive_mean: f64,
    pub count: usize,
}

/// Paired Monte Carlo estimate of `J*(0) − J*(θ)` with both optimal policies
/// taken from the dynamic program.
pub fn dp_power_mc(problem: &ScalarProblem, law: &ScalarLaw, count: usize, seed: u64, nodes: usize) -> Result<DpPower> {
    if count < 2 {
        return Err(Error::InvalidArgument("Monte Carlo needs at least 2 samples".into()));
    }
    let dp = ScalarDp::solve(problem, law, false, nodes);
    let base = ScalarDp::solve(problem, law, true, nodes);
    let pairs: Vec<(f64, f64)> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let (w, v): (Vec<f64>, Vec<f64>) = (0..problem.horizon)
                .map(|t| law.sample(&mut rng::stream(seed, i, t as u64)))
                .unzip();
            let zeros = vec![0.0; problem.horizon];
            (base.rollout(&w, &zeros), dp.rollout(&w, &v))
        })
        .collect();
    let k = count as f64;
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / k;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(DpPower {
        estimate: mean,
        std_error: (var / k).sqrt(),
        baseline_mean: pairs.iter().map(|p| p.0).sum::<f64>() / k,
        predictive_mean: pairs.iter().map(|p| p.1).sum::<f64>() / k,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::riccati_backward;
    use crate::presets;

    #[test]
    fn quadrature_moments() {
        let q = gauss_hermite(20);
        let m = |k: i32| q.iter().map(|&(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
    }

    #[test]
    fn lqr_cost_to_go_matches_riccati() {
        let sys = presets::stable_scalar(3).unwrap();
        let ric = riccati_backward(&sys).unwrap();
        let p = ScalarProblem::lqr(0.5, 1.0, 1.0, 1.0, 1.0, 3);
        let dp = ScalarDp::solve(&p, &ScalarLaw::Gaussian { rho: 0.5 }, true, 30);
        let c0 = dp.expected_cost_to_go(1, 0.0);
        let c1 = dp.expected_cost_to_go(1, 1.0);
        assert!(((c1 - c0) - ric.p[1][(0, 0)]).abs() < 1e-3, "{} vs {}", c1 - c0, ric.p[1][(0, 0)]);
    }

    #[test]
    fn growth_matrix_for_lqr() {
        let sys = presets::stable_scalar(3).unwrap();
        let ric = riccati_backward(&sys).unwrap();
        let p = ScalarProblem::lqr(0.5, 1.0, 1.0, 1.0, 1.0, 3);
        let budget = CheckBudget { outer: 200, ..Default::default() };
        for t in 0..3 {
            let rep = growth_condition_check(&p, &ScalarLaw::Gaussian { rho: 0.5 }, t, &budget).unwrap();
            let exact = ric.m[t][(0, 0)];
            assert!((rep.m_candidate - exact).abs() < 0.05 * exact, "t={t}: {} vs {exact}", rep.m_candidate);
        }
    }

    #[test]
    fn binary_example_conditions() {
        let p = ScalarProblem::lqr(0.0, 1.0, 1.0, 0.0, 1.0, 4);
        let budget = CheckBudget { outer: 200, ..Default::default() };
        let c1 = growth_condition_check(&p, &ScalarLaw::BinaryPerfect, 1, &budget).unwrap();
        assert!((c1.m_candidate - 1.0).abs() < 0.01);
        let c2 = variance_condition_check(&p, &ScalarLaw::BinaryPerfect, 1, &budget).unwrap();
        assert!((c2.sigma_candidate - 1.0).abs() < 1e-6);
        let power = dp_power_mc(&p, &ScalarLaw::BinaryPerfect, 200, 3, 20).unwrap();
        assert!((power.estimate - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_costs_have_no_growth() {
        let zero = ConvexFn::quadratic(DMatrix::zeros(1, 1));
        let p = ScalarProblem { a: 0.5, b: 1.0, horizon: 2, state: zero.clone(), input: zero.clone(), terminal: zero };
        let rep = growth_condition_check(&p, &ScalarLaw::Gaussian { rho: 0.5 }, 0, &CheckBudget::default()).unwrap();
        assert!(rep.m_candidate.abs() < 1e-9);
    }

    #[test]
    fn deterministic_disturbances_have_no_spread() {
        let p = ScalarProblem::lqr(0.5, 1.0, 1.0, 1.0, 1.0, 3);
        let rep = variance_condition_check(&p, &ScalarLaw::Deterministic, 2, &CheckBudget::default()).unwrap();
        assert_eq!(rep.sigma_candidate, 0.0);
    }

    #[test]
    fn budget_limits() {
        let p = ScalarProblem::lqr(0.5, 1.0, 1.0, 1.0, 1.0, 6);
        assert!(matches!(
            growth_condition_check(&p, &ScalarLaw::Gaussian { rho: 0.5 }, 0, &CheckBudget::default()),
            Err(Error::BudgetExceeded(_))
        ));
        let q = ScalarProblem::lqr(0.5, 1.0, 1.0, 1.0, 1.0, 3);
        let big = CheckBudget { outer: 5000, ..Default::default() };
        assert!(matches!(variance_condition_check(&q, &ScalarLaw::Deterministic, 0, &big), Err(Error::BudgetExceeded(_))));
    }
}
