use nalgebra::DMatrix;
use predpower::bounds::{
    covariance_power_bound, curvature_power_bound, dp_power_mc, growth_condition_check, mu_ell_recursion,
    variance_condition_check, CheckBudget, CovarianceBound, InputGainBound, ScalarLaw, ScalarProblem,
};
use serde_json::{json, Value};

use crate::config::{BoundInstance, Tolerances};
use crate::error::CliResult;
use crate::report::{Cell, Outcome, Table};

fn instance(which: BoundInstance) -> (&'static str, ScalarProblem, ScalarLaw) {
    match which {
        BoundInstance::LqrToy => ("lqr-toy", ScalarProblem::lqr(0.5, 1.0, 1.0, 1.0, 1.0, 4), ScalarLaw::Gaussian { rho: 0.5 }),
        BoundInstance::BinaryExample => {
            ("binary-example", ScalarProblem::lqr(0.0, 1.0, 1.0, 0.0, 1.0, 4), ScalarLaw::BinaryPerfect)
        }
        BoundInstance::NonquadraticToy => {
            ("nonquadratic-toy", ScalarProblem::nonquadratic_toy(), ScalarLaw::Gaussian { rho: 0.8 })
        }
    }
}

pub fn run(
    instances: &[BoundInstance],
    count: usize,
    budget: &CheckBudget,
    nodes: usize,
    seed: u64,
    tol: &Tolerances,
) -> CliResult<Outcome> {
    let mut table = Table::new(
        "bounds",
        &["instance", "bound_kind", "bound", "estimate", "std_error", "slack", "pass"],
    );
    let mut steps = Table::new(
        "bounds_steps",
        &["instance", "t", "m_candidate", "sigma_candidate", "sigma_std_error", "mu", "ell", "ell_ceiling"],
    );
    let mut reports: Vec<Value> = Vec::new();
    let mut out = Outcome::default();
    let mut all_sound = true;
    let mut recursion_ok = true;
    for &which in instances {
        let (name, problem, law) = instance(which);
        let horizon = problem.horizon;
        let budget = CheckBudget { seed: budget.seed.wrapping_add(seed), ..*budget };
        let mc = dp_power_mc(&problem, &law, count, seed, nodes)?;

        let mut m = Vec::with_capacity(horizon);
        let mut sigma = Vec::with_capacity(horizon);
        let mut rows = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let growth = growth_condition_check(&problem, &law, t, &budget)?;
            let spread = variance_condition_check(&problem, &law, t, &budget)?;
            m.push(DMatrix::from_element(1, 1, growth.m_candidate));
            sigma.push((spread.sigma_candidate - 2.0 * spread.std_error).max(0.0));
            rows.push((t, growth.m_candidate, spread.sigma_candidate, spread.std_error));
        }
        let covariance = covariance_power_bound(&m, &CovarianceBound::Traces(sigma))?;

        let cond = problem.conditioning();
        let recursion = cond.map(|c| mu_ell_recursion(&c, horizon, InputGainBound::Upper)).transpose()?;
        for (t, mc_, s, se) in rows {
            let (mu, ell, ceil) = match (&recursion, cond) {
                (Some(r), Some(_)) => (r.mu[t].into(), r.ell[t].into(), r.ell_ceiling.into()),
                _ => (Cell::Empty, Cell::Empty, Cell::Empty),
            };
            steps.push(vec![name.into(), t.into(), mc_.into(), s.into(), se.into(), mu, ell, ceil]);
        }
        if let (Some(r), Some(c)) = (&recursion, cond) {
            let ok = r.mu.iter().all(|&mu| c.mu_x <= mu) && r.ell.iter().all(|&ell| ell <= r.ell_ceiling);
            recursion_ok &= ok;
            out.check(
                format!("{name}_recursion_bounds"),
                ok,
                format!("μ_x = {}, min μ_t = {}, ℓ ceiling = {}, max ℓ_t = {}", c.mu_x, min(&r.mu), r.ell_ceiling, max(&r.ell)),
            );
        }
        let curvature = match cond {
            Some(c) => Some(curvature_power_bound(&c, &vec![law.explained_variance(); horizon], 1, InputGainBound::Upper)?),
            None => None,
        };

        let ceiling = mc.estimate + tol.sigma * mc.std_error + tol.absolute;
        for (kind, bound) in [("covariance", Some(covariance)), ("curvature", curvature)] {
            let Some(bound) = bound else { continue };
            let slack = ceiling - bound;
            let pass = slack >= 0.0;
            all_sound &= pass;
            table.push(vec![
                name.into(),
                kind.into(),
                bound.into(),
                mc.estimate.into(),
                mc.std_error.into(),
                slack.into(),
                if pass { "true" } else { "false" }.into(),
            ]);
            out.metric(format!("{name}_{kind}_bound"), bound);
            out.check(
                format!("{name}_{kind}_sound"),
                pass,
                format!("bound {bound:.6} vs estimate {:.6} + {}·{:.2e}", mc.estimate, tol.sigma, mc.std_error),
            );
            reports.push(json!({
                "name": format!("{name}/{kind}"),
                "bound": bound,
                "estimate": mc.estimate,
                "std_error": mc.std_error,
                "slack": slack,
                "pass": pass,
            }));
        }
        out.metric(format!("{name}_power_estimate"), mc.estimate);
    }
    out.metric("all_sound", f64::from(u8::from(all_sound)));
    out.metric("recursion_ok", f64::from(u8::from(recursion_ok)));
    out.tables.push(table);
    out.tables.push(steps);
    out.documents.push(("bounds".into(), Value::Array(reports)));
    Ok(out)
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
