//! One function per experiment, each returning an [`Outcome`].

mod bounds;
mod counterexample;
mod mgaps;
mod mse;
mod power;
mod selftest;

use nalgebra::DMatrix;

use crate::config::{ExperimentConfig, ExperimentSpec};
use crate::error::CliResult;
use crate::report::{Cell, Outcome};

pub use selftest::selftest_cases;

pub fn dispatch(config: &ExperimentConfig, seed: u64) -> CliResult<Outcome> {
    let tol = &config.tolerances;
    match &config.spec {
        ExperimentSpec::Riccati { system } => power::riccati(system),
        ExperimentSpec::PowerClosedForm { system, predictor, expect } => {
            power::closed_form(system, predictor, *expect, tol)
        }
        ExperimentSpec::PowerMc { system, predictor, count } => power::monte_carlo(system, predictor, *count, seed, tol),
        ExperimentSpec::PowerEstimate { system, predictor, count, window, dataset } => {
            power::estimate(system, predictor, *count, *window, dataset.as_deref(), seed, tol)
        }
        ExperimentSpec::MseSweep { system, rhos, thetas, train_samples, test_samples } => {
            mse::sweep(system, rhos, thetas, *train_samples, *test_samples, seed, tol)
        }
        ExperimentSpec::MultiStep1d { horizon, power_count, test_samples, mse_steps } => {
            mse::multistep(*horizon, *power_count, *test_samples, mse_steps, seed, tol)
        }
        ExperimentSpec::Mgaps { .. } => mgaps::run(&config.spec, seed, tol),
        ExperimentSpec::Counterexample { p, grid } => counterexample::run(*p, *grid, tol),
        ExperimentSpec::Bounds { instances, count, budget, nodes } => {
            bounds::run(instances, *count, budget, *nodes, seed, tol)
        }
        ExperimentSpec::Selftest => selftest::run(seed),
    }
}

/// Row-major entries of a matrix as table cells.
fn entries(m: &DMatrix<f64>) -> Vec<Cell> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)].into());
        }
    }
    out
}

/// Column names `prefix_ij` in row-major order.
fn entry_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(format!("{prefix}_{i}{j}"));
        }
    }
    out
}

fn relative(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (a - b).abs() / b.abs()
    }
}
