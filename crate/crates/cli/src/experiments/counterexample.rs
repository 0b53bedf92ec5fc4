use num_rational::Ratio;
use predpower::rollout::{mpc_counterexample, mpc_counterexample_rational};
use serde_json::json;

use crate::config::Tolerances;
use crate::error::{CliError, CliResult};
use crate::report::{Outcome, Table};

pub fn run(p: f64, grid: usize, tol: &Tolerances) -> CliResult<Outcome> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CliError::Config(format!("p: {p} must lie in (0, 1)")));
    }
    if grid < 2 {
        return Err(CliError::Config("grid: must be at least 2".into()));
    }
    let float = mpc_counterexample(p)?;
    let exact = Ratio::<i64>::approximate_float(p)
        .map(mpc_counterexample_rational)
        .transpose()?;

    let mut table = Table::new(
        "counterexample_grid",
        &["p", "p_exact", "mpc", "mpc_exact", "alternative", "alternative_exact", "mpc_above_threshold"],
    );
    let mut violations = 0usize;
    let mut threshold = None;
    for k in 1..grid {
        let q = Ratio::new(k as i64, grid as i64);
        let c = mpc_counterexample_rational(q)?;
        let above = c.mpc >= c.threshold;
        violations += usize::from(!above);
        let f = |r: &Ratio<i64>| *r.numer() as f64 / *r.denom() as f64;
        table.push(vec![
            f(&q).into(),
            q.to_string().into(),
            f(&c.mpc).into(),
            c.mpc.to_string().into(),
            f(&c.alternative).into(),
            c.alternative.to_string().into(),
            if above { "true" } else { "false" }.into(),
        ]);
        threshold = Some(c.threshold);
    }

    let mut out = Outcome::default();
    out.metric("mpc", float.mpc);
    out.metric("alternative", float.alternative);
    out.metric("threshold", float.threshold);
    out.metric("grid_violations", violations as f64);
    let strict = match &exact {
        Some(c) => c.alternative < c.mpc,
        None => float.alternative + tol.absolute < float.mpc,
    };
    out.check("alternative_beats_mpc", strict, format!("alternative {} vs MPC {}", float.alternative, float.mpc));
    out.check(
        "mpc_above_threshold_on_grid",
        violations == 0,
        format!("{violations} of {} grid points below {}", grid - 1, threshold.map_or(String::new(), |t| t.to_string())),
    );
    let exact_doc = exact.as_ref().map(|c| {
        json!({
            "mpc": c.mpc.to_string(),
            "alternative": c.alternative.to_string(),
            "threshold": c.threshold.to_string(),
            "mpc_first_action": c.mpc_first_action.to_string(),
        })
    });
    out.documents.push((
        "counterexample".into(),
        json!({
            "p": p,
            "mpc": float.mpc,
            "alternative": float.alternative,
            "threshold": float.threshold,
            "mpc_first_action": float.mpc_first_action,
            "exact": exact_doc,
        }),
    ));
    out.tables.push(table);
    Ok(out)
}
