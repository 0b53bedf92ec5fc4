//! Config-driven experiment runner: each experiment writes CSV or JSON
//! tables plus a `report.json` manifest into its output directory.

pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use report::{ExperimentReport, Format, Outcome};

/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "PP_SEED";

/// Seed precedence: explicit flag, then config, then `PP_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: &ExperimentConfig, env: Option<&str>) -> CliResult<u64> {
    if let Some(s) = flag.or(config.seed) {
        return Ok(s);
    }
    match env {
        Some(text) => text
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}: {text:?} is not an unsigned integer"))),
        None => Ok(0),
    }
}

/// Output directory: explicit flag, then config, then `out/<experiment>`.
pub fn resolve_out_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(config.spec.name()))
}

/// Runs an experiment without writing anything.
pub fn evaluate(config: &ExperimentConfig, seed: u64) -> CliResult<Outcome> {
    experiments::dispatch(config, seed)
}

/// Runs an experiment and writes its outputs and manifest into `out_dir`.
pub fn run(config: &ExperimentConfig, seed: u64, out_dir: &Path, format: Format) -> CliResult<ExperimentReport> {
    let start = Instant::now();
    let outcome = evaluate(config, seed)?;
    let report = ExperimentReport {
        experiment: config.spec.name().into(),
        seed,
        config: config.to_value(),
        metrics: outcome.metrics.clone(),
        checks: outcome.checks.clone(),
        files: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
        passed: outcome.passed(),
    };
    let (_, report) = report::write_outputs(out_dir, format, &outcome, report)?;
    Ok(report)
}

/// `(name, description)` of every named system.
pub fn list_presets() -> Vec<(&'static str, &'static str)> {
    predpower::presets::PRESETS.iter().map(|p| (p.name, p.description)).collect()
}
