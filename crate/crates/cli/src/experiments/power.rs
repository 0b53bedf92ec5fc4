use std::path::Path;

use predpower::estimation::{prediction_power_evaluate, HistoryWindow, PowerEvalConfig};
use predpower::lqr::{baseline_cost_closed_form, prediction_power_closed_form, prediction_power_terms, riccati_backward};
use predpower::predictors::{read_dataset, SampledInstances};
use predpower::rollout::prediction_power_mc;
use serde_json::json;

use super::{entries, entry_names, relative};
use crate::config::{window_label, PredictorSpec, SystemSpec, Tolerances};
use crate::error::{CliError, CliResult};
use crate::report::{Cell, Outcome, Table};

pub fn riccati(system: &SystemSpec) -> CliResult<Outcome> {
    let sys = system.build()?;
    let ric = riccati_backward(&sys)?;
    let (n, m) = (sys.n(), sys.m());
    let mut header = vec!["t".to_string()];
    header.extend(entry_names("P", n, n));
    header.extend(entry_names("K", m, n));
    let mut table = Table::with_header("riccati", header);
    for t in 0..=sys.horizon {
        let mut row = vec![Cell::from(t)];
        row.extend(entries(&ric.p[t]));
        if t < sys.horizon {
            row.extend(entries(&ric.k[t]));
        } else {
            row.extend(std::iter::repeat_n(Cell::Empty, m * n));
        }
        table.push(row);
    }
    let mut out = Outcome::default();
    out.metric("p0_trace", ric.p[0].trace());
    out.tables.push(table);
    Ok(out)
}

pub fn closed_form(
    system: &SystemSpec,
    predictor: &PredictorSpec,
    expect: Option<f64>,
    tol: &Tolerances,
) -> CliResult<Outcome> {
    let sys = system.build()?;
    let model = predictor.build(sys.n(), sys.horizon)?;
    let ric = riccati_backward(&sys)?;
    let terms = prediction_power_terms(&sys, &ric, &model)?;
    let power: f64 = terms.iter().sum();
    let mut table = Table::new("power_terms", &["t", "term", "cumulative"]);
    let mut acc = 0.0;
    for (t, term) in terms.iter().enumerate() {
        acc += term;
        table.push(vec![t.into(), (*term).into(), acc.into()]);
    }
    let mut out = Outcome::default();
    out.metric("power", power);
    out.metric("power_per_step", power / sys.horizon as f64);
    out.metric("baseline_cost", baseline_cost_closed_form(&sys, &ric, &model)?);
    if let Some(e) = expect {
        let gap = (power - e).abs();
        out.check("expected_power", gap <= tol.absolute.max(tol.absolute * e.abs()), format!("{power} vs {e}"));
    }
    out.tables.push(table);
    Ok(out)
}

pub fn monte_carlo(
    system: &SystemSpec,
    predictor: &PredictorSpec,
    count: usize,
    seed: u64,
    tol: &Tolerances,
) -> CliResult<Outcome> {
    let sys = system.build()?;
    let model = predictor.build(sys.n(), sys.horizon)?;
    let ric = riccati_backward(&sys)?;
    let cf = prediction_power_closed_form(&sys, &ric, &model)?;
    let mc = prediction_power_mc(&sys, &ric, &model, count, seed)?;
    let label = model.label();
    let mut table =
        Table::new("power_mc", &["experiment_id", "param", "policy", "mean_cost", "std_error", "count", "seed"]);
    let rows = [
        ("baseline", mc.baseline.mean, mc.baseline.std_error),
        ("predictive", mc.predictive.mean, mc.predictive.std_error),
        ("power", mc.estimate, mc.std_error),
        ("power_closed_form", cf, 0.0),
    ];
    for (policy, mean, se) in rows {
        table.push(vec![
            "power-mc".into(),
            label.clone().into(),
            policy.into(),
            mean.into(),
            se.into(),
            count.into(),
            seed.into(),
        ]);
    }
    let mut out = Outcome::default();
    out.metric("power_mc", mc.estimate);
    out.metric("std_error", mc.std_error);
    out.metric("unpaired_std_error", mc.unpaired_std_error);
    out.metric("power_closed_form", cf);
    let gap = (mc.estimate - cf).abs();
    out.check(
        "mc_within_sigma",
        gap <= tol.sigma * mc.std_error + tol.absolute,
        format!("|{} − {cf}| = {gap:.3e}, {} standard errors allowed of {:.3e}", mc.estimate, tol.sigma, mc.std_error),
    );
    let rel = relative(mc.estimate, cf);
    out.check(
        "mc_relative_gap",
        rel < tol.mc_relative || gap <= tol.absolute,
        format!("relative gap {rel:.4} (limit {})", tol.mc_relative),
    );
    out.tables.push(table);
    Ok(out)
}

pub fn estimate(
    system: &SystemSpec,
    predictor: &PredictorSpec,
    count: usize,
    window: HistoryWindow,
    dataset: Option<&Path>,
    seed: u64,
    tol: &Tolerances,
) -> CliResult<Outcome> {
    let sys = system.build()?;
    let model = predictor.build(sys.n(), sys.horizon)?;
    let ric = riccati_backward(&sys)?;
    let cf = prediction_power_closed_form(&sys, &ric, &model)?;
    let cfg = PowerEvalConfig { window, ..PowerEvalConfig::default() };
    let est = match dataset {
        Some(stem) => {
            let (header, instances) = read_dataset(stem)?;
            if header.horizon != sys.horizon || header.n != sys.n() {
                return Err(CliError::Config(format!(
                    "dataset: horizon {} and n {} do not match the system",
                    header.horizon, header.n
                )));
            }
            prediction_power_evaluate(&sys, instances.as_slice(), &cfg)?
        }
        None => prediction_power_evaluate(&sys, &SampledInstances { model: &model, seed, count }, &cfg)?,
    };
    let mut table = Table::new("power_estimate_terms", &["t", "trace_baseline", "trace_theta", "m_min_eig"]);
    for term in &est.terms {
        table.push(vec![term.t.into(), term.trace_baseline.into(), term.trace_theta.into(), term.m_min_eig.into()]);
    }
    let rel = relative(est.estimate, cf);
    let mut out = Outcome::default();
    out.metric("estimate", est.estimate);
    out.metric("std_error", est.std_error);
    out.metric("closed_form", cf);
    out.metric("relative_error", rel);
    out.check("estimate_relative_gap", rel < tol.estimate_relative, format!("relative error {rel:.4} (limit {})", tol.estimate_relative));
    out.documents.push((
        "power_estimate".into(),
        json!({
            "estimate": est.estimate,
            "std_error": est.std_error,
            "test_count": est.test_count,
            "closed_form": cf,
            "relative_error": rel,
            "window": window_label(&window),
        }),
    ));
    out.tables.push(table);
    Ok(out)
}
