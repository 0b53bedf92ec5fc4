//! Acceptance criteria 1 to 10, one PASS/FAIL line each.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use predpower::bounds::{
    action_variance_check, covariance_power_bound, curvature_probe, infimal_convolution, variance_passthrough_check,
    Certificates, CovarianceBound,
};
use predpower::convex::{ConvexFn, ScalarTerm};
use predpower::error::{Error, Result as CoreResult};
use predpower::lqr::{prediction_power_closed_form, riccati_backward, LtvSystem};
use predpower::predictors::{sample_instance, History, PredictorModel};
use predpower::presets;
use predpower::rollout::{prediction_power_mc, run_policy, PolicyFn};
use predpower_cli::{evaluate, ExperimentConfig, Outcome};
use serde_json::json;

type Verdict = Result<String, String>;

fn config(value: serde_json::Value) -> ExperimentConfig {
    ExperimentConfig::from_value(value).expect("valid config")
}

fn summarize(out: &Outcome) -> Verdict {
    let detail = out.checks.iter().map(|c| format!("{} [{}]", c.detail, if c.pass { "ok" } else { "failed" })).collect::<Vec<_>>().join("; ");
    if out.passed() && !out.checks.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_config(value: serde_json::Value, seed: u64) -> Verdict {
    let out = evaluate(&config(value), seed).map_err(|e| format!("error: {e}"))?;
    summarize(&out)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let v = run_config(
        json!({
            "experiment": "power-mc",
            "system": {"preset": "double-integrator", "horizon": 100},
            "predictor": {"kind": "affine_gaussian", "rho": 0.5, "theta": "identity"},
            "count": 16000
        }),
        0,
    )?;
    Ok(format!("{v}; {:.1} s", start.elapsed().as_secs_f64()))
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let v = run_config(
        json!({
            "experiment": "mse-sweep",
            "system": {"preset": "double-integrator", "horizon": 100},
            "rhos": [0.5],
            "thetas": ["identity", "rotated"],
            "train_samples": 64000,
            "test_samples": 10_000_000
        }),
        0,
    )?;
    Ok(format!("{v}; {:.1} s", start.elapsed().as_secs_f64()))
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let v = run_config(
        json!({
            "experiment": "power-estimate",
            "system": {"preset": "double-integrator", "horizon": 50},
            "predictor": {"kind": "affine_gaussian", "rho": 0.5, "theta": "identity"},
            "count": 20000
        }),
        0,
    )?;
    Ok(format!("{v}; {:.1} s", start.elapsed().as_secs_f64()))
}

fn criterion_4() -> Verdict {
    run_config(json!({"experiment": "multistep-1d", "horizon": 100, "power_count": 20000, "test_samples": 40000}), 0)
}

fn criterion_5() -> Verdict {
    let fail = |e: Error| format!("error: {e}");
    let horizon = 10;
    let sys = presets::binary_example(horizon).map_err(fail)?;
    if sys.x0.iter().any(|&x| x != 0.0) {
        return Err("preset x0 is not zero".into());
    }
    let ric = riccati_backward(&sys).map_err(fail)?;
    let model = PredictorModel::binary_perfect(1, horizon).map_err(fail)?;
    let mc = prediction_power_mc(&sys, &ric, &model, 10_000, 0).map_err(fail)?;
    let ones = vec![DMatrix::from_element(1, 1, 1.0); horizon];
    let bound = covariance_power_bound(&ones, &CovarianceBound::Matrices(ones.clone())).map_err(fail)?;
    let cf = prediction_power_closed_form(&sys, &ric, &model).map_err(fail)?;
    let detail = format!(
        "Monte Carlo {} with standard error {}, bound {bound}, closed form {cf}",
        mc.estimate, mc.std_error
    );
    let exact = mc.estimate == 10.0 && mc.std_error == 0.0 && bound == 10.0 && (cf - 10.0).abs() <= 4.0 * f64::EPSILON * 10.0;
    if exact {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let v = run_config(json!({"experiment": "counterexample", "p": 0.1, "grid": 100}), 0)?;
    let secs = start.elapsed().as_secs_f64();
    if secs < 1.0 {
        Ok(format!("{v}; {secs:.3} s"))
    } else {
        Err(format!("{v}; took {secs:.3} s"))
    }
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let s1 = run_config(json!({"experiment": "mgaps", "scenario": 1}), 0);
    let s2 = run_config(json!({"experiment": "mgaps", "scenario": 2}), 0);
    let secs = start.elapsed().as_secs_f64();
    match (s1, s2) {
        (Ok(a), Ok(b)) => Ok(format!("scenario 1: {a}; scenario 2: {b}; {secs:.1} s")),
        (a, b) => Err(format!("scenario 1: {}; scenario 2: {}", a.unwrap_or_else(|e| e), b.unwrap_or_else(|e| e))),
    }
}

fn criterion_8() -> Verdict {
    let out = evaluate(&config(json!({"experiment": "bounds"})), 0).map_err(|e| format!("error: {e}"))?;
    let sound = out.checks.iter().filter(|c| c.name.ends_with("_sound")).count();
    let recursion = out.checks.iter().filter(|c| c.name.ends_with("_recursion_bounds")).count();
    if sound != 6 || recursion != 3 {
        return Err(format!("expected 6 soundness and 3 recursion checks, got {sound} and {recursion}"));
    }
    summarize(&out)
}

fn smooth_pair() -> (ConvexFn, ConvexFn, DMatrix<f64>) {
    let f = ConvexFn::separable(DVector::from_vec(vec![1.0, 1.5]), 0.1, ScalarTerm::Quartic);
    let omega = ConvexFn::separable(DVector::from_vec(vec![2.0, 2.0]), 0.3, ScalarTerm::LogCosh);
    let b = DMatrix::from_row_slice(2, 2, &[0.8, -0.3, 0.2, 0.6]);
    (f, omega, b)
}

fn criterion_9() -> Verdict {
    let fail = |e: Error| format!("error: {e}");
    let mut notes = Vec::new();
    let mut ok = true;

    let (f, omega, b) = smooth_pair();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for x in [vec![0.3, -1.2], vec![2.0, 0.5], vec![-1.5, -0.7], vec![0.0, 0.0]] {
        let x = DVector::from_vec(x);
        let (_, u) = infimal_convolution(&f, &omega, &b, &x).map_err(fail)?;
        let analytic = omega.grad(&(&x - &b * &u));
        for i in 0..2 {
            let mut e = DVector::zeros(2);
            e[i] = h;
            let up = infimal_convolution(&f, &omega, &b, &(&x + &e)).map_err(fail)?.0;
            let down = infimal_convolution(&f, &omega, &b, &(&x - &e)).map_err(fail)?.0;
            worst = worst.max(((up - down) / (2.0 * h) - analytic[i]).abs());
        }
    }
    ok &= worst < 1e-6;
    notes.push(format!("gradient identity error {worst:.2e}"));

    let lo = DVector::from_element(2, -3.0);
    let hi = DVector::from_element(2, 3.0);
    let quad_f = ConvexFn::isotropic(2, 1.0);
    let quad_w = ConvexFn::isotropic(2, 2.0);
    let eye = DMatrix::identity(2, 2);
    let grad = |x: &DVector<f64>| {
        let (_, u) = infimal_convolution(&quad_f, &quad_w, &eye, x).expect("quadratic solve");
        quad_w.grad(&(x - &eye * u))
    };
    let (mu_q, ell_q) = curvature_probe(grad, &lo, &hi, 400, 1);
    let quad_slack = (mu_q - 2.0 / 3.0).min(2.0 - ell_q);
    let nb = b.singular_values().max();
    let predicted = omega.mu() * f.mu() / (f.mu() + nb * nb * omega.mu());
    let grad = |x: &DVector<f64>| {
        let (_, u) = infimal_convolution(&f, &omega, &b, x).expect("smooth solve");
        omega.grad(&(x - &b * u))
    };
    let (mu_s, ell_s) = curvature_probe(grad, &lo, &hi, 400, 2);
    let smooth_slack = (mu_s - predicted).min(omega.ell().unwrap_or(f64::INFINITY) - ell_s);
    ok &= quad_slack >= -1e-6 && smooth_slack >= -1e-6;
    notes.push(format!("curvature slack {quad_slack:.2e} (quadratic), {smooth_slack:.2e} (smooth)"));

    let samples = 1_000_000;
    let f2 = ConvexFn::quadratic(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.5]));
    let w2 = ConvexFn::isotropic(2, 2.0);
    let b2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.7]);
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
    let rep = action_variance_check(&f2, &w2, &b2, &DVector::zeros(2), &sigma, samples, 4).map_err(fail)?;
    ok &= rep.trace_cov >= rep.bound - 3.0 * rep.std_error;
    notes.push(format!("trace {:.4} ± {:.1e} vs bound {:.4}", rep.trace_cov, rep.std_error, rep.bound));

    let phi = ConvexFn::separable(DVector::from_vec(vec![1.0, 1.0]), 0.1, ScalarTerm::LogCosh);
    let certs = Certificates { gamma: 1.0, lipschitz: 1.1 };
    let rep = variance_passthrough_check(&phi, Some(certs), &DVector::zeros(2), &sigma, samples, 2).map_err(fail)?;
    ok &= rep.min_eig >= rep.bound - 3.0 * rep.std_error;
    notes.push(format!("eigenvalue {:.4} ± {:.1e} vs bound {:.4}", rep.min_eig, rep.std_error, rep.bound));

    if ok {
        Ok(notes.join("; "))
    } else {
        Err(notes.join("; "))
    }
}

/// Reads the disturbance that is about to be realized.
struct Peek;

impl PolicyFn for Peek {
    fn act(&self, system: &LtvSystem, t: usize, _x: &DVector<f64>, history: &History) -> CoreResult<DVector<f64>> {
        Ok(-(&system.b[t].transpose() * history.disturbance(t)?))
    }
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("output dir")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_10() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let configs = [
        json!({"experiment": "power-mc", "system": {"preset": "double-integrator", "horizon": 40},
               "predictor": {"kind": "shifted_affine_gaussian", "rho": 0.5, "theta": "rotated"}, "count": 3000}),
        json!({"experiment": "power-estimate", "system": {"preset": "double-integrator", "horizon": 10},
               "predictor": {"kind": "affine_gaussian", "rho": 0.5, "theta": "identity"}, "count": 2000}),
        json!({"experiment": "mgaps", "scenario": 2, "system": {"preset": "double-integrator", "horizon": 4000},
               "replicates": 3}),
        json!({"experiment": "bounds", "count": 2000}),
    ];
    let mut compared = 0;
    for (k, cfg) in configs.iter().enumerate() {
        let path = tmp.path().join(format!("c{k}.json"));
        std::fs::write(&path, cfg.to_string()).map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for threads in [1, 4] {
            let dir = tmp.path().join(format!("c{k}_t{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_predpower"))
                .args(["run", "--config"])
                .arg(&path)
                .args(["--seed", "11", "--threads", &threads.to_string(), "--out-dir"])
                .arg(&dir)
                .output()
                .map_err(|e| e.to_string())?;
            if !matches!(status.status.code(), Some(0 | 1)) {
                return Err(format!("config {k} exited with {:?}: {}", status.status, String::from_utf8_lossy(&status.stderr)));
            }
            outputs.push(csv_files(&dir));
        }
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            return Err(format!("config {k}: CSV outputs differ between 1 and 4 threads"));
        }
        compared += outputs[0].len();
    }
    let sys = presets::binary_example(5).map_err(|e| e.to_string())?;
    let model = PredictorModel::binary_perfect(1, 5).map_err(|e| e.to_string())?;
    match run_policy(&sys, &Peek, &sample_instance(&model, 3)) {
        Err(Error::InformationLeak { .. }) => {}
        other => return Err(format!("leak probe not blocked: {other:?}")),
    }
    Ok(format!("{compared} CSV files byte-identical across thread counts; leak probe blocked"))
}

fn main() {
    let criteria: [(u32, fn() -> Verdict); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, run) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {n}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
