use predpower::lqr::{prediction_power_closed_form, riccati_backward};
use predpower::policy_opt::{optimal_in_class_improvement, run_replicates, PolicyClassSpec};
use predpower::predictors::PredictorModel;
use serde_json::json;

use super::{entry_names, relative};
use crate::config::{ExperimentSpec, Tolerances};
use crate::error::{CliError, CliResult};
use crate::report::{Cell, Outcome, Table};

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn run(spec: &ExperimentSpec, seed: u64, tol: &Tolerances) -> CliResult<Outcome> {
    let ExperimentSpec::Mgaps { system, scenario, rho, theta, replicates, record_every, eta0, window_fraction } = spec
    else {
        unreachable!("dispatched on the variant");
    };
    if *replicates == 0 {
        return Err(CliError::Config("replicates: must be positive".into()));
    }
    if *record_every == 0 {
        return Err(CliError::Config("record_every: must be positive".into()));
    }
    if !(*window_fraction > 0.0 && *window_fraction <= 1.0) {
        return Err(CliError::Config("window_fraction: must lie in (0, 1]".into()));
    }
    let sys = system.build()?;
    let horizon = sys.horizon;
    let n = sys.n();
    let model = match scenario {
        1 => PredictorModel::affine_gaussian(*rho, theta.build(n)?, horizon)?,
        2 => PredictorModel::shifted_affine_gaussian(*rho, theta.build(n)?, horizon)?,
        other => return Err(CliError::Config(format!("scenario: expected 1 or 2, got {other}"))),
    };
    let ric = riccati_backward(&sys)?;
    let reference = prediction_power_closed_form(&sys, &ric, &model)? / horizon as f64;
    let class =
        PolicyClassSpec { eta0: *eta0, record_every: *record_every, ..PolicyClassSpec::new(ric.k[0].clone(), model.d()) };
    let optimum = optimal_in_class_improvement(&sys, &model, &class)?;
    let runs = run_replicates(&sys, &model, &class, horizon, seed, *replicates)?;

    let (m, d) = class.upsilon0.shape();
    let mut out = Outcome::default();
    for (k, rec) in runs.iter().enumerate() {
        let mut header = vec!["t".to_string(), "improvement".to_string()];
        header.extend(entry_names("upsilon", m, d));
        let mut table = Table::with_header(format!("mgaps_s{scenario}_rep{k}"), header);
        for (i, &t) in rec.times.iter().enumerate() {
            let mut row = vec![Cell::from(t), rec.improvement[i].into()];
            row.extend(rec.upsilon[i].iter().map(|&v| Cell::from(v)));
            table.push(row);
        }
        out.tables.push(table);
    }
    let mut aggregate = Table::new(format!("mgaps_s{scenario}_aggregate"), &["t", "mean", "p25", "p75", "reference"]);
    for (i, &t) in runs[0].times.iter().enumerate() {
        let mut vals: Vec<f64> = runs.iter().map(|r| r.improvement[i]).collect();
        vals.sort_by(f64::total_cmp);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        aggregate.push(vec![
            t.into(),
            mean.into(),
            quantile(&vals, 0.25).into(),
            quantile(&vals, 0.75).into(),
            reference.into(),
        ]);
    }
    out.tables.push(aggregate);

    let late: Vec<f64> = runs.iter().map(|r| r.final_window_improvement(*window_fraction)).collect();
    let k = late.len() as f64;
    let late_mean = late.iter().sum::<f64>() / k;
    let late_sd = if late.len() > 1 {
        (late.iter().map(|v| (v - late_mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    out.metric("reference", reference);
    out.metric("in_class_optimum", optimum.improvement);
    out.metric("late_mean", late_mean);
    out.metric("late_sd", late_sd);
    out.metric("late_relative_to_reference", late_mean / reference);

    let rel_ref = relative(late_mean, reference);
    let rel_opt = relative(late_mean, optimum.improvement);
    out.check(
        "in_class_below_reference",
        optimum.improvement <= reference * (1.0 + tol.absolute) + tol.absolute,
        format!("in-class optimum {:.6} vs reference {reference:.6}", optimum.improvement),
    );
    if *scenario == 1 {
        out.check(
            "late_near_reference",
            rel_ref <= tol.online_relative,
            format!("late mean {late_mean:.6} is {rel_ref:.4} from reference {reference:.6} (limit {})", tol.online_relative),
        );
    } else {
        out.check(
            "plateau_below_reference",
            late_mean <= tol.plateau_fraction * reference,
            format!("late mean {late_mean:.6} is {:.4} of reference (limit {})", late_mean / reference, tol.plateau_fraction),
        );
        out.check(
            "late_near_in_class_optimum",
            rel_opt <= tol.online_relative,
            format!(
                "late mean {late_mean:.6} is {rel_opt:.4} from in-class optimum {:.6} (limit {})",
                optimum.improvement, tol.online_relative
            ),
        );
    }
    out.documents.push((
        format!("mgaps_s{scenario}_summary"),
        json!({
            "scenario": scenario,
            "horizon": horizon,
            "replicates": replicates,
            "reference": reference,
            "in_class_optimum": optimum.improvement,
            "in_class_upsilon": optimum.upsilon.transpose().as_slice(),
            "late_window_fraction": window_fraction,
            "late_improvements": late,
            "late_mean": late_mean,
            "late_sd": late_sd,
        }),
    ));
    Ok(out)
}
