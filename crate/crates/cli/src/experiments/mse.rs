use predpower::estimation::{per_step_mse, prediction_power_evaluate, HistoryWindow, PowerEvalConfig, RegressorConfig};
use predpower::lqr::{baseline_cost_closed_form, prediction_power_closed_form, riccati_backward};
use nalgebra::{DMatrix, DVector};
use predpower::estimation::{fit_linear, RegressionDataset};
use predpower::predictors::{mse_per_entry, InstanceSource, PredictorModel, SampledInstances};
use rayon::prelude::*;
use predpower::presets;

use crate::config::{SystemSpec, ThetaSpec, Tolerances};
use crate::error::{CliError, CliResult};
use crate::report::{Cell, Outcome, Table};

/// Instances needed so that the training split holds `train` rows.
fn instances_for(rows: usize, fraction: f64) -> usize {
    (rows as f64 / fraction).ceil() as usize
}

/// Per-entry MSE at step 0 of a regressor fitted on `source`, measured on
/// `rows` fresh instances that follow it.
fn held_out_mse(source: &SampledInstances, rows: usize, reg: &RegressorConfig) -> CliResult<DVector<f64>> {
    const CHUNK: usize = 1 << 16;
    if rows == 0 {
        return Err(CliError::Config("test_samples: must be positive".into()));
    }
    let (n, d) = (source.model.n(), source.model.d());
    let block = |start: usize, len: usize| {
        let x = DMatrix::from_fn(len, d, |i, j| source.prediction(start + i, 0)[j]);
        let y = DMatrix::from_fn(len, n, |i, j| source.disturbance(start + i, 0)[j]);
        (x, y)
    };
    let (x, y) = block(0, source.count);
    let fit = fit_linear(&RegressionDataset::new(x, y, reg.split)?, reg)?;
    let end = source.count + rows;
    let sums: Vec<DVector<f64>> = (0..rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = source.count + c * CHUNK;
            let (x, y) = block(start, CHUNK.min(end - start));
            let resid = y - fit.predict(&x);
            DVector::from_fn(n, |j, _| resid.column(j).norm_squared())
        })
        .collect();
    let total = sums.iter().fold(DVector::zeros(n), |acc, s| acc + s);
    Ok(total / rows as f64)
}

pub fn sweep(
    system: &SystemSpec,
    rhos: &[f64],
    thetas: &[ThetaSpec],
    train_samples: usize,
    test_samples: Option<usize>,
    seed: u64,
    tol: &Tolerances,
) -> CliResult<Outcome> {
    if thetas.len() < 2 {
        return Err(CliError::Config("thetas: need at least two predictors to compare".into()));
    }
    let sys = system.build()?;
    let n = sys.n();
    let ric = riccati_backward(&sys)?;
    let reg = RegressorConfig::default();
    let count = instances_for(train_samples, reg.split.0);
    let mut header = vec!["rho".to_string(), "predictor".to_string()];
    header.extend((0..n).map(|j| format!("mse_{j}")));
    header.extend(["power", "baseline_cost", "cost"].map(String::from));
    let mut table = Table::with_header("mse_sweep", header);
    let mut worst_mse: f64 = 0.0;
    let mut smallest_ratio_gap = f64::INFINITY;
    let mut out = Outcome::default();
    for &rho in rhos {
        let mut mses = Vec::new();
        let mut powers = Vec::new();
        for theta in thetas {
            let model = PredictorModel::affine_gaussian(rho, theta.build(n)?, sys.horizon)?;
            let src = SampledInstances { model: &model, seed, count };
            let mse = match test_samples {
                None => mse_per_entry(&src, &[0], &reg)?,
                Some(rows) => held_out_mse(&src, rows, &reg)?,
            };
            let power = prediction_power_closed_form(&sys, &ric, &model)?;
            let base = baseline_cost_closed_form(&sys, &ric, &model)?;
            let mut row = vec![Cell::from(rho), theta.label().into()];
            row.extend(mse.iter().map(|&v| Cell::from(v)));
            row.extend([power.into(), base.into(), (base - power).into()]);
            table.push(row);
            mses.push(mse);
            powers.push(power);
        }
        worst_mse = worst_mse.max((&mses[0] - &mses[1]).amax());
        if rho > 0.0 {
            smallest_ratio_gap = smallest_ratio_gap.min((powers[0] / powers[1] - 1.0).abs());
        }
    }
    out.metric("train_rows", (count as f64 * reg.split.0).floor());
    let standard_test = count - (count as f64 * reg.split.0).floor() as usize - (count as f64 * reg.split.1).floor() as usize;
    out.metric("test_rows", test_samples.unwrap_or(standard_test) as f64);
    out.metric("max_mse_difference", worst_mse);
    out.metric("min_power_ratio_gap", smallest_ratio_gap);
    out.check(
        "mse_agreement",
        worst_mse <= tol.mse_agreement,
        format!("largest per-entry MSE difference {worst_mse:.3e} (limit {})", tol.mse_agreement),
    );
    if smallest_ratio_gap.is_finite() {
        out.check(
            "power_ratio_gap",
            smallest_ratio_gap > tol.power_ratio_gap,
            format!("smallest |P_a/P_b − 1| over ρ > 0 is {smallest_ratio_gap:.4} (needs > {})", tol.power_ratio_gap),
        );
    }
    out.tables.push(table);
    Ok(out)
}

pub fn multistep(
    horizon: usize,
    power_count: usize,
    test_samples: usize,
    mse_steps: &[usize],
    seed: u64,
    tol: &Tolerances,
) -> CliResult<Outcome> {
    if mse_steps.is_empty() {
        return Err(CliError::Config("mse_steps: must not be empty".into()));
    }
    if let Some(&t) = mse_steps.iter().find(|&&t| t >= horizon) {
        return Err(CliError::Config(format!("mse_steps: step {t} outside horizon {horizon}")));
    }
    let sys = presets::scalar_unit(horizon)?;
    let ric = riccati_backward(&sys)?;
    let reg = RegressorConfig::default();
    let window = HistoryWindow::default();
    let mse_count = instances_for(test_samples, reg.split.2);
    let mut powers = Vec::new();
    let mut step_mses = Vec::new();
    let mut power_table = Table::new("multistep_power", &["variant", "estimate", "std_error", "closed_form", "test_count"]);
    for variant in [1u8, 2] {
        let model = PredictorModel::multi_step_1d(variant, [1.0; 3], horizon)?;
        let cf = prediction_power_closed_form(&sys, &ric, &model)?;
        let src = SampledInstances { model: &model, seed, count: power_count };
        let est = prediction_power_evaluate(&sys, &src, &PowerEvalConfig { window, ..PowerEvalConfig::default() })?;
        power_table.push(vec![
            format!("V({variant})").into(),
            est.estimate.into(),
            est.std_error.into(),
            cf.into(),
            est.test_count.into(),
        ]);
        let src = SampledInstances { model: &model, seed: seed.wrapping_add(1), count: mse_count };
        step_mses.push(per_step_mse(&src, mse_steps, window, &reg)?);
        powers.push(est);
    }

    let mut header = vec!["t".to_string()];
    for v in 1..=2 {
        header.extend(["mse_current", "se_current", "mse_next", "se_next"].map(|c| format!("{c}_v{v}")));
    }
    let mut mse_table = Table::with_header("multistep_mse", header);
    let mut weakest = f64::INFINITY;
    for (a, b) in step_mses[0].iter().zip(&step_mses[1]) {
        let mut row = vec![Cell::from(a.t)];
        for s in [a, b] {
            let opt = |v: Option<f64>| v.map_or(Cell::Empty, Cell::from);
            row.extend([s.mse_current.into(), s.se_current.into(), opt(s.mse_next), opt(s.se_next)]);
        }
        mse_table.push(row);
        let z = (b.mse_current - a.mse_current) / a.se_current.hypot(b.se_current);
        weakest = weakest.min(z);
    }

    let (p1, p2) = (&powers[0], &powers[1]);
    let combined = p1.std_error.hypot(p2.std_error);
    let power_z = (p1.estimate - p2.estimate).abs() / combined;
    let mut out = Outcome::default();
    out.metric("power_v1", p1.estimate);
    out.metric("power_v2", p2.estimate);
    out.metric("power_gap_sigma", power_z);
    out.metric("min_mse_separation_sigma", weakest);
    out.check(
        "equal_power",
        power_z <= tol.power_agreement_sigma,
        format!("|P1 − P2| = {power_z:.2} combined standard errors (limit {})", tol.power_agreement_sigma),
    );
    out.check(
        "unequal_mse",
        weakest > tol.mse_separation_sigma,
        format!("V(2) MSE exceeds V(1) by at least {weakest:.2} combined standard errors (needs > {})", tol.mse_separation_sigma),
    );
    out.tables.push(power_table);
    out.tables.push(mse_table);
    Ok(out)
}
