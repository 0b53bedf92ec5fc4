//! Closed-loop simulation and Monte Carlo cost evaluation.

use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use num_traits::{FromPrimitive, Num};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::ConvexFn;
use crate::error::{Error, Result};
use crate::lqr::{feedforward_window, LtvSystem, RiccatiSolution};
use crate::predictors::{sample_instance_indexed, History, PredictorModel, ProblemInstance};

/// Anything that maps the current state and information set to an action.
pub trait PolicyFn: Sync {
    fn act(&self, system: &LtvSystem, t: usize, x: &DVector<f64>, history: &History) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Upsilon {
    Fixed(DMatrix<f64>),
    PerStep(Vec<DMatrix<f64>>),
}

impl Upsilon {
    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        match self {
            Upsilon::Fixed(m) => m,
            Upsilon::PerStep(v) => &v[t],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions { tolerance: 1e-9, max_iterations: 100_000 }
    }
}

#[derive(Debug, Clone)]
pub enum Policy<'a> {
    /// `u_t = −K_t x_t`.
    NoPredictionLqr { riccati: &'a RiccatiSolution },
    /// `u_t = −K_t x_t` plus the feedforward of the model's conditional means.
    OptimalPredictive { riccati: &'a RiccatiSolution, model: &'a PredictorModel },
    /// `u_t = −K_t x_t + Υ_t v_t`.
    LinearPredictive { riccati: &'a RiccatiSolution, upsilon: Upsilon },
    /// First action of the certainty-equivalent plan against the conditional
    /// means (zero means without a model).
    Planner { cost: &'a CostSpec, model: Option<&'a PredictorModel>, options: PlannerOptions },
}

impl PolicyFn for Policy<'_> {
    fn act(&self, system: &LtvSystem, t: usize, x: &DVector<f64>, history: &History) -> Result<DVector<f64>> {
        match self {
            Policy::NoPredictionLqr { riccati } => Ok(-(&riccati.k[t] * x)),
            Policy::OptimalPredictive { riccati, model } => {
                let win = model.conditional_means(history)?;
                let ff = feedforward_window(riccati, system, t, win.start, &win.means)?;
                Ok(ff - &riccati.k[t] * x)
            }
            Policy::LinearPredictive { riccati, upsilon } => {
                Ok(upsilon.at(t) * history.current_prediction() - &riccati.k[t] * x)
            }
            Policy::Planner { cost, model, options } => {
                let mut means = vec![DVector::zeros(system.n()); system.horizon - t];
                if let Some(model) = model {
                    let win = model.conditional_means(history)?;
                    for (j, m) in win.means.into_iter().enumerate() {
                        means[win.start - t + j] = m;
                    }
                }
                let plan = certainty_equivalent_plan(cost, system, t, x, &means, options)?;
                Ok(plan.into_iter().next().expect("non-empty plan"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// `T` stage costs followed by the terminal cost.
    pub stage_costs: Vec<f64>,
    pub total: f64,
}

impl Trajectory {
    /// Re-applies the dynamics and reports the largest state discrepancy.
    pub fn replay_error(&self, system: &LtvSystem, instance: &ProblemInstance) -> f64 {
        (0..system.horizon)
            .map(|t| (system.step(t, &self.x[t], &self.u[t], &instance.w[t]) - &self.x[t + 1]).abs().max())
            .fold(0.0, f64::max)
    }
}

/// Runs a policy on one instance under the system's quadratic costs, or under
/// `cost` when given.
pub fn run_policy_costed<P: PolicyFn + ?Sized>(
    system: &LtvSystem,
    policy: &P,
    instance: &ProblemInstance,
    cost: Option<&CostSpec>,
) -> Result<Trajectory> {
    let horizon = system.horizon;
    if instance.horizon() != horizon {
        return Err(Error::DimensionMismatch(format!(
            "instance horizon {} vs system horizon {horizon}",
            instance.horizon()
        )));
    }
    let mut x = Vec::with_capacity(horizon + 1);
    let mut u = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon + 1);
    x.push(system.x0.clone());
    for t in 0..horizon {
        let h = instance.history(t);
        let ut = policy.act(system, t, &x[t], &h)?;
        if ut.len() != system.m() {
            return Err(Error::DimensionMismatch(format!("policy returned {} inputs", ut.len())));
        }
        stage_costs.push(match cost {
            Some(c) => c.stage(t, &x[t], &ut),
            None => system.stage_cost(t, &x[t], &ut),
        });
        let next = system.step(t, &x[t], &ut, &instance.w[t]);
        u.push(ut);
        x.push(next);
    }
    stage_costs.push(match cost {
        Some(c) => c.terminal.value(&x[horizon]),
        None => system.terminal_cost(&x[horizon]),
    });
    let total = stage_costs.iter().sum();
    Ok(Trajectory { x, u, stage_costs, total })
}

pub fn run_policy<P: PolicyFn + ?Sized>(system: &LtvSystem, policy: &P, instance: &ProblemInstance) -> Result<Trajectory> {
    run_policy_costed(system, policy, instance, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub costs: Option<Vec<f64>>,
}

impl CostReport {
    pub fn from_samples(costs: Vec<f64>, keep: bool) -> Self {
        let count = costs.len();
        let mean = costs.iter().sum::<f64>() / count as f64;
        let var = if count > 1 {
            costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        CostReport { mean, std_error: (var / count as f64).sqrt(), count, costs: keep.then_some(costs) }
    }
}

/// Mean cost of a policy over `count` instances sampled from `model`.
pub fn monte_carlo_cost<P: PolicyFn + ?Sized>(
    system: &LtvSystem,
    policy: &P,
    model: &PredictorModel,
    count: usize,
    seed: u64,
) -> Result<CostReport> {
    if count < 2 {
        return Err(Error::InvalidArgument("Monte Carlo needs at least 2 samples".into()));
    }
    let costs: Vec<f64> = (0..count as u64)
        .into_par_iter()
        .map(|i| run_policy(system, policy, &sample_instance_indexed(model, seed, i)).map(|tr| tr.total))
        .collect::<Result<_>>()?;
    Ok(CostReport::from_samples(costs, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPower {
    pub estimate: f64,
    pub std_error: f64,
    /// Standard error the same samples would give without pairing.
    pub unpaired_std_error: f64,
    pub baseline: CostReport,
    pub predictive: CostReport,
}

/// `J*(0) − J*(θ)` from the no-prediction and optimal predictive policies run
/// on the same instances.
pub fn prediction_power_mc(
    system: &LtvSystem,
    riccati: &RiccatiSolution,
    model: &PredictorModel,
    count: usize,
    seed: u64,
) -> Result<PairedPower> {
    if count < 2 {
        return Err(Error::InvalidArgument("Monte Carlo needs at least 2 samples".into()));
    }
    let base = Policy::NoPredictionLqr { riccati };
    let pred = Policy::OptimalPredictive { riccati, model };
    let pairs: Vec<(f64, f64)> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let inst = sample_instance_indexed(model, seed, i);
            Ok((run_policy(system, &base, &inst)?.total, run_policy(system, &pred, &inst)?.total))
        })
        .collect::<Result<_>>()?;
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let baseline = CostReport::from_samples(pairs.iter().map(|p| p.0).collect(), false);
    let predictive = CostReport::from_samples(pairs.iter().map(|p| p.1).collect(), false);
    let paired = CostReport::from_samples(diffs, false);
    Ok(PairedPower {
        estimate: paired.mean,
        std_error: paired.std_error,
        unpaired_std_error: baseline.std_error.hypot(predictive.std_error),
        baseline,
        predictive,
    })
}

/// Separable per-step costs `h_t(x,u) = h_t^x(x) + h_t^u(u)` and `h_T(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub state: Vec<ConvexFn>,
    pub input: Vec<ConvexFn>,
    pub terminal: ConvexFn,
}

impl CostSpec {
    pub fn uniform(horizon: usize, state: ConvexFn, input: ConvexFn, terminal: ConvexFn) -> Self {
        CostSpec { state: vec![state; horizon], input: vec![input; horizon], terminal }
    }

    /// The system's own costs `xᵀQx`, `uᵀRu`, `xᵀP_T x`.
    pub fn from_system(system: &LtvSystem) -> Self {
        CostSpec {
            state: system.q.iter().map(|q| ConvexFn::quadratic(q * 2.0)).collect(),
            input: system.r.iter().map(|r| ConvexFn::quadratic(r * 2.0)).collect(),
            terminal: ConvexFn::quadratic(&system.p_terminal * 2.0),
        }
    }

    pub fn horizon(&self) -> usize {
        self.state.len()
    }

    pub fn stage(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.state[t].value(x) + self.input[t].value(u)
    }
}

fn plan_objective(
    cost: &CostSpec,
    system: &LtvSystem,
    t: usize,
    x: &DVector<f64>,
    means: &[DVector<f64>],
    u: &[DVector<f64>],
    with_grad: bool,
) -> (f64, Vec<DVector<f64>>) {
    let horizon = system.horizon;
    let mut xs = Vec::with_capacity(horizon - t + 1);
    xs.push(x.clone());
    let mut value = 0.0;
    for (j, tau) in (t..horizon).enumerate() {
        value += cost.stage(tau, &xs[j], &u[j]);
        let next = system.step(tau, &xs[j], &u[j], &means[j]);
        xs.push(next);
    }
    value += cost.terminal.value(&xs[horizon - t]);
    if !with_grad {
        return (value, Vec::new());
    }
    let mut grad = vec![DVector::zeros(system.m()); horizon - t];
    let mut lambda = cost.terminal.grad(&xs[horizon - t]);
    for tau in (t..horizon).rev() {
        let j = tau - t;
        grad[j] = cost.input[tau].grad(&u[j]) + system.b[tau].transpose() * &lambda;
        lambda = cost.state[tau].grad(&xs[j]) + system.a[tau].transpose() * lambda;
    }
    (value, grad)
}

fn flat_norm_sq(v: &[DVector<f64>]) -> f64 {
    v.iter().map(|x| x.norm_squared()).sum()
}

/// Minimizes the deterministic cost-to-go from `x` at `t` with the
/// disturbances fixed to `means` (`T − t` entries).
pub fn certainty_equivalent_plan(
    cost: &CostSpec,
    system: &LtvSystem,
    t: usize,
    x: &DVector<f64>,
    means: &[DVector<f64>],
    options: &PlannerOptions,
) -> Result<Vec<DVector<f64>>> {
    let horizon = system.horizon;
    if t >= horizon || means.len() != horizon - t || cost.horizon() != horizon {
        return Err(Error::DimensionMismatch("planner window does not match the horizon".into()));
    }
    let mut u = vec![DVector::zeros(system.m()); horizon - t];
    let (mut value, mut grad) = plan_objective(cost, system, t, x, means, &u, true);
    let mut step = 1e-3;
    for _ in 0..options.max_iterations {
        let gnorm_sq = flat_norm_sq(&grad);
        if gnorm_sq.sqrt() <= options.tolerance {
            return Ok(u);
        }
        let mut alpha = step;
        let (candidate, cand_value) = loop {
            let cand: Vec<DVector<f64>> = u.iter().zip(&grad).map(|(a, g)| a - g * alpha).collect();
            let (v, _) = plan_objective(cost, system, t, x, means, &cand, false);
            let below_roundoff = alpha * gnorm_sq <= 1e-13 * value.abs().max(1.0);
            if v <= value - 1e-4 * alpha * gnorm_sq
                || (below_roundoff && v <= value + 1e-12 * value.abs().max(1.0))
                || alpha < 1e-300
            {
                break (cand, v);
            }
            alpha *= 0.5;
        };
        let (_, new_grad) = plan_objective(cost, system, t, x, means, &candidate, true);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for j in 0..u.len() {
            let s = &candidate[j] - &u[j];
            let y = &new_grad[j] - &grad[j];
            ss += s.norm_squared();
            sy += s.dot(&y);
        }
        step = if sy > 0.0 { ss / sy } else { alpha * 2.0 };
        u = candidate;
        value = cand_value;
        grad = new_grad;
    }
    let residual = flat_norm_sq(&grad).sqrt();
    if residual <= options.tolerance {
        return Ok(u);
    }
    Err(Error::NoConvergence { iterations: options.max_iterations, residual })
}

/// Expected costs of certainty-equivalent MPC and of waiting for the
/// revealed disturbance, in the two-step problem with a hard terminal
/// constraint `x_2 ≤ 0` and `P(W_1 = 1) = p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample<T> {
    pub mpc: T,
    pub alternative: T,
    pub threshold: T,
    pub mpc_first_action: T,
}

fn num<T: FromPrimitive>(k: i64) -> T {
    T::from_i64(k).expect("small integer")
}

fn frac<T: Num + FromPrimitive>(a: i64, b: i64) -> T {
    num::<T>(a) / num::<T>(b)
}

/// Minimizes `u² + (x + u + w)²` subject to `x + u + w ≤ 0`.
fn replan<T: Num + FromPrimitive + Clone + PartialOrd>(x1: T, w: T) -> T {
    let drift = x1 + w;
    let u = T::zero() - drift.clone() / num(2);
    if drift.clone() + u.clone() > T::zero() {
        T::zero() - drift
    } else {
        u
    }
}

/// Exact expected costs over the two `W_1` branches, in any ordered field.
pub fn mpc_counterexample_exact<T: Num + FromPrimitive + Clone + PartialOrd>(p: T) -> Counterexample<T> {
    let q = T::one() - p.clone();
    // Time-0 plan: min 2u0² + u1² + E(u0+u1+W)² s.t. u0 + u1 + 1 ≤ 0.
    // Unconstrained optimum u1 = 2u0 = −2p/5 violates the constraint for
    // p < 5/3, so the plan sits on u0 + u1 = −1: min 2u0² + (1+u0)².
    let interior_sum = T::zero() - num::<T>(3) * p.clone() / num(5);
    let u0 = if interior_sum + T::one() <= T::zero() {
        T::zero() - p.clone() / num(5)
    } else {
        frac(-1, 3)
    };
    let x1 = u0.clone();
    let branch = |w: T| {
        let u1 = replan(x1.clone(), w.clone());
        let x2 = x1.clone() + u1.clone() + w;
        u0.clone() * u0.clone() + x1.clone() * x1.clone() + u1.clone() * u1 + x2.clone() * x2
    };
    let mpc = q.clone() * branch(T::zero()) + p.clone() * branch(T::one());
    let wait = |w: T| {
        let u1 = replan(T::zero(), w.clone());
        let x2 = u1.clone() + w;
        u1.clone() * u1 + x2.clone() * x2
    };
    let alternative = q * wait(T::zero()) + p * wait(T::one());
    Counterexample { mpc, alternative, threshold: frac(2, 9), mpc_first_action: u0 }
}

pub fn mpc_counterexample(p: f64) -> Result<Counterexample<f64>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p = {p} must lie in (0, 1)")));
    }
    Ok(mpc_counterexample_exact(p))
}

pub fn mpc_counterexample_rational(p: Ratio<i64>) -> Result<Counterexample<Ratio<i64>>> {
    if p <= Ratio::from_integer(0) || p >= Ratio::from_integer(1) {
        return Err(Error::InvalidArgument(format!("p = {p} must lie in (0, 1)")));
    }
    Ok(mpc_counterexample_exact(p))
}
