//! Regression-based estimation of prediction power.
//!
//! The pipeline regresses surrogate-optimal actions on history features, once
//! with the baseline information set and once with the predictor's, and
//! compares the `M_t`-weighted residual covariances on a held-out split.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, psd_clip, symmetrize, trace_product};
use crate::lqr::{riccati_backward, surrogate_actions_all, LtvSystem};
use crate::predictors::InstanceSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    pub ridge_grid: Vec<f64>,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig { split: (0.7, 0.1, 0.2), ridge_grid: vec![0.0, 1e-6, 1e-4, 1e-2] }
    }
}

/// Rows are split contiguously: train first, then validation, then test.
#[derive(Debug, Clone)]
pub struct RegressionDataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub split: (f64, f64, f64),
    n_train: usize,
    n_val: usize,
}

impl RegressionDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>, split: (f64, f64, f64)) -> Result<Self> {
        let (a, b, c) = split;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions {split:?} must be positive and sum to 1")));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        let rows = inputs.nrows();
        let n_train = (rows as f64 * a).floor() as usize;
        let n_val = (rows as f64 * b).floor() as usize;
        let n_test = rows - n_train - n_val;
        if n_test < 30 {
            return Err(Error::InsufficientData(format!("{n_test} test rows, need at least 30")));
        }
        if n_train < inputs.ncols() + 1 {
            return Err(Error::InsufficientData(format!(
                "{n_train} train rows for {} features",
                inputs.ncols()
            )));
        }
        Ok(RegressionDataset { inputs, targets, split, n_train, n_val })
    }

    fn part(&self, start: usize, len: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.inputs.rows(start, len).into_owned(), self.targets.rows(start, len).into_owned())
    }

    pub fn train(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.part(0, self.n_train)
    }

    pub fn val(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.part(self.n_train, self.n_val)
    }

    pub fn test(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.part(self.n_train + self.n_val, self.n_test())
    }

    pub fn n_test(&self) -> usize {
        self.inputs.nrows() - self.n_train - self.n_val
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressor {
    /// `p×q`; rows of constant training columns are zero.
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub ridge: f64,
}

impl LinearRegressor {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weights;
        for mut row in y.row_iter_mut() {
            row += self.intercept.transpose();
        }
        y
    }
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n)
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

fn sq_error(fit: &LinearRegressor, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (y - fit.predict(x)).norm_squared() / x.nrows().max(1) as f64
}

/// Least squares with the ridge strength chosen on the validation split.
pub fn fit_linear(ds: &RegressionDataset, config: &RegressorConfig) -> Result<LinearRegressor> {
    let (x, y) = ds.train();
    let (p, q) = (x.ncols(), y.ncols());
    let n = x.nrows() as f64;
    let xm = column_means(&x);
    let ym = column_means(&y);
    let xc = centered(&x, &xm);
    let yc = centered(&y, &ym);
    let keep: Vec<usize> = (0..p)
        .filter(|&j| {
            let var = xc.column(j).norm_squared() / n;
            var > 1e-24 * xm[j].powi(2).max(1.0)
        })
        .collect();
    let xk = xc.select_columns(&keep);
    let gram = symmetrize(&(xk.transpose() * &xk / n));
    let cross = xk.transpose() * &yc / n;
    let (vx, vy) = ds.val();
    let (score_x, score_y) = if vx.nrows() > 0 { (vx, vy) } else { (x.clone(), y.clone()) };

    let mut best: Option<(f64, LinearRegressor)> = None;
    for &lambda in &config.ridge_grid {
        let k = keep.len();
        let reg = &gram + DMatrix::identity(k, k) * lambda;
        let solved = if k == 0 {
            Some(DMatrix::zeros(0, q))
        } else {
            reg.cholesky().map(|c| c.solve(&cross))
        };
        let Some(wk) = solved else { continue };
        if wk.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let mut weights = DMatrix::zeros(p, q);
        for (r, &j) in keep.iter().enumerate() {
            weights.row_mut(j).copy_from(&wk.row(r));
        }
        let intercept = &ym - weights.transpose() * &xm;
        let fit = LinearRegressor { weights, intercept, ridge: lambda };
        let score = sq_error(&fit, &score_x, &score_y);
        if !score.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, fit));
        }
    }
    best.map(|(_, f)| f).ok_or(Error::RankDeficient)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub count: usize,
}

/// Test-split residuals of the fitted regressor.
pub fn test_residuals(ds: &RegressionDataset, config: &RegressorConfig) -> Result<DMatrix<f64>> {
    let fit = fit_linear(ds, config)?;
    let (x, y) = ds.test();
    Ok(y - fit.predict(&x))
}

fn residual_cov(res: &DMatrix<f64>) -> CovarianceEstimate {
    let matrix = psd_clip(&symmetrize(&(res.transpose() * res / res.nrows() as f64)));
    CovarianceEstimate { matrix, count: res.nrows() }
}

/// Expected conditional covariance estimator.
pub fn ecce(ds: &RegressionDataset, config: &RegressorConfig) -> Result<CovarianceEstimate> {
    Ok(residual_cov(&test_residuals(ds, config)?))
}

/// Which part of the history becomes regression features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryWindow {
    /// `v_t, …, v_{t−predictions+1}` and `w_{t−1}, …, w_{t−disturbances}`;
    /// entries before the start are the pre-horizon prediction or zeros.
    Recent { predictions: usize, disturbances: usize },
    /// Every observed disturbance and prediction.
    Full,
}

impl Default for HistoryWindow {
    fn default() -> Self {
        HistoryWindow::Recent { predictions: 2, disturbances: 1 }
    }
}

impl HistoryWindow {
    fn width(&self, n: usize, d: usize, t: usize, baseline: bool, prior: bool) -> usize {
        match *self {
            HistoryWindow::Recent { predictions, disturbances } => {
                disturbances * n + if baseline { 0 } else { predictions * d }
            }
            HistoryWindow::Full => t * n + if baseline { 0 } else { (t + 1 + prior as usize) * d },
        }
    }
}

fn write_features<S: InstanceSource + ?Sized>(
    source: &S,
    i: usize,
    t: usize,
    window: HistoryWindow,
    baseline: bool,
    out: &mut Vec<f64>,
) {
    let (n, d) = (source.n(), source.d());
    match window {
        HistoryWindow::Recent { predictions, disturbances } => {
            if !baseline {
                for lag in 0..predictions {
                    if lag <= t {
                        out.extend(source.prediction(i, t - lag).iter());
                    } else if lag == t + 1 {
                        match source.prior(i) {
                            Some(p) => out.extend(p.iter()),
                            None => out.extend(std::iter::repeat_n(0.0, d)),
                        }
                    } else {
                        out.extend(std::iter::repeat_n(0.0, d));
                    }
                }
            }
            for lag in 1..=disturbances {
                if lag <= t {
                    out.extend(source.disturbance(i, t - lag).iter());
                } else {
                    out.extend(std::iter::repeat_n(0.0, n));
                }
            }
        }
        HistoryWindow::Full => {
            for tau in 0..t {
                out.extend(source.disturbance(i, tau).iter());
            }
            if !baseline {
                if let Some(p) = source.prior(i) {
                    out.extend(p.iter());
                }
                for tau in 0..=t {
                    out.extend(source.prediction(i, tau).iter());
                }
            }
        }
    }
}

/// `N × p` feature matrix of the information set at time `t`.
pub fn history_features<S: InstanceSource + ?Sized>(
    source: &S,
    t: usize,
    window: HistoryWindow,
    baseline: bool,
) -> DMatrix<f64> {
    let count = source.count();
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            write_features(source, i, t, window, baseline, &mut row);
            row
        })
        .collect();
    let p = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(count, p, |r, c| rows[r][c])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEvalConfig {
    pub regressor: RegressorConfig,
    pub window: HistoryWindow,
    /// Largest feature matrix, in floats, built for a single step.
    pub feature_budget: usize,
}

impl Default for PowerEvalConfig {
    fn default() -> Self {
        PowerEvalConfig {
            regressor: RegressorConfig::default(),
            window: HistoryWindow::default(),
            feature_budget: 200_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTerm {
    pub t: usize,
    pub trace_baseline: f64,
    pub trace_theta: f64,
    pub m_min_eig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub estimate: f64,
    /// From the per-instance paired differences of weighted squared residuals.
    pub std_error: f64,
    pub test_count: usize,
    pub terms: Vec<StepTerm>,
}

/// Prediction power estimated from data by regressing surrogate-optimal
/// actions on the baseline and predictor histories.
pub fn prediction_power_evaluate<S: InstanceSource + ?Sized>(
    system: &LtvSystem,
    source: &S,
    config: &PowerEvalConfig,
) -> Result<PowerEstimate> {
    let count = source.count();
    let horizon = system.horizon;
    if count < 1000 {
        return Err(Error::InsufficientData(format!("{count} instances, need at least 1000")));
    }
    if source.horizon() != horizon || source.n() != system.n() {
        return Err(Error::DimensionMismatch("instances do not match the system".into()));
    }
    let has_prior = source.prior(0).is_some();
    let widest = (0..horizon)
        .map(|t| config.window.width(source.n(), source.d(), t, false, has_prior))
        .max()
        .unwrap_or(0);
    let needed = widest.saturating_mul(count);
    if needed > config.feature_budget {
        return Err(Error::HistoryFeatureOverflow { needed, budget: config.feature_budget });
    }
    let riccati = riccati_backward(system)?;
    let m = system.m();

    let targets: Vec<Vec<DVector<f64>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let w: Vec<DVector<f64>> = (0..horizon).map(|t| source.disturbance(i, t)).collect();
            surrogate_actions_all(&riccati, system, &w)
        })
        .collect::<Result<_>>()?;

    let per_step: Vec<(StepTerm, DVector<f64>)> = (0..horizon)
        .into_par_iter()
        .map(|t| {
            let y = DMatrix::from_fn(count, m, |i, k| targets[i][t][k]);
            let mt = &riccati.m[t];
            let run = |baseline: bool| -> Result<DMatrix<f64>> {
                let x = history_features(source, t, config.window, baseline);
                let ds = RegressionDataset::new(x, y.clone(), config.regressor.split)?;
                test_residuals(&ds, &config.regressor)
            };
            let r0 = run(true)?;
            let r1 = run(false)?;
            let z = DVector::from_fn(r0.nrows(), |i, _| {
                let a = r0.row(i).transpose();
                let b = r1.row(i).transpose();
                a.dot(&(mt * &a)) - b.dot(&(mt * &b))
            });
            let term = StepTerm {
                t,
                trace_baseline: trace_product(mt, &residual_cov(&r0).matrix),
                trace_theta: trace_product(mt, &residual_cov(&r1).matrix),
                m_min_eig: min_eigenvalue(mt),
            };
            Ok((term, z))
        })
        .collect::<Result<_>>()?;

    let test_count = per_step.first().map_or(0, |(_, z)| z.len());
    let mut z = DVector::zeros(test_count);
    let mut terms = Vec::with_capacity(horizon);
    let mut estimate = 0.0;
    for (term, zt) in per_step {
        estimate += term.trace_baseline - term.trace_theta;
        z += zt;
        terms.push(term);
    }
    let mean = z.mean();
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (test_count as f64 - 1.0);
    Ok(PowerEstimate { estimate, std_error: (var / test_count as f64).sqrt(), test_count, terms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMse {
    pub t: usize,
    pub mse_current: f64,
    pub se_current: f64,
    pub mse_next: Option<f64>,
    pub se_next: Option<f64>,
}

fn mse_with_se(res: &DMatrix<f64>) -> (f64, f64) {
    let sq: Vec<f64> = res.row_iter().map(|r| r.norm_squared()).collect();
    let k = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / k;
    let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Test MSE of predicting `w_t` and `w_{t+1}` from the predictor history at
/// each listed step.
pub fn per_step_mse<S: InstanceSource + ?Sized>(
    source: &S,
    steps: &[usize],
    window: HistoryWindow,
    config: &RegressorConfig,
) -> Result<Vec<StepMse>> {
    let count = source.count();
    let horizon = source.horizon();
    let n = source.n();
    steps
        .par_iter()
        .map(|&t| {
            if t >= horizon {
                return Err(Error::UnsupportedTarget { target: t, horizon });
            }
            let x = history_features(source, t, window, false);
            let fit_target = |tau: usize| -> Result<(f64, f64)> {
                let y = DMatrix::from_fn(count, n, |i, k| source.disturbance(i, tau)[k]);
                let ds = RegressionDataset::new(x.clone(), y, config.split)?;
                Ok(mse_with_se(&test_residuals(&ds, config)?))
            };
            let (mse_current, se_current) = fit_target(t)?;
            let next = if t + 1 < horizon { Some(fit_target(t + 1)?) } else { None };
            Ok(StepMse { t, mse_current, se_current, mse_next: next.map(|v| v.0), se_next: next.map(|v| v.1) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalCovarianceReport {
    /// `E[Cov(E[X|F′] | F)]`.
    pub explained: DMatrix<f64>,
    /// `E[Cov(X | F)]`.
    pub coarse: DMatrix<f64>,
    /// `E[Cov(X | F′)]`.
    pub fine: DMatrix<f64>,
    pub defect: f64,
}

fn cells(labels: &[usize]) -> HashMap<usize, Vec<usize>> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    map
}

fn mean_of(x: &[DVector<f64>], idx: &[usize]) -> DVector<f64> {
    let mut m = DVector::zeros(x[0].len());
    for &i in idx {
        m += &x[i];
    }
    m / idx.len() as f64
}

/// Expected within-cell covariance, with plug-in moments.
fn within(points: &[(DVector<f64>, f64)], groups: &HashMap<usize, Vec<usize>>, total: f64) -> DMatrix<f64> {
    let q = points[0].0.len();
    let mut acc = DMatrix::zeros(q, q);
    let mut keys: Vec<&usize> = groups.keys().collect();
    keys.sort();
    for key in keys {
        let idx = &groups[key];
        let wsum: f64 = idx.iter().map(|&i| points[i].1).sum();
        let mut mean = DVector::zeros(q);
        for &i in idx {
            mean += &points[i].0 * points[i].1;
        }
        mean /= wsum;
        for &i in idx {
            let d = &points[i].0 - &mean;
            acc += &d * d.transpose() * (points[i].1 / total);
        }
    }
    symmetrize(&acc)
}

/// Checks `E[Cov(E[X|F′]|F)] = E[Cov(X|F)] − E[Cov(X|F′)]` for nested labelings,
/// with `F′` at least as fine as `F`.
pub fn total_covariance_check(x: &[DVector<f64>], f: &[usize], f_fine: &[usize]) -> Result<TotalCovarianceReport> {
    if x.is_empty() {
        return Err(Error::EmptyCell("no samples".into()));
    }
    if f.len() != x.len() || f_fine.len() != x.len() {
        return Err(Error::ShapeMismatch("label vectors must match the sample count".into()));
    }
    let mut parent: HashMap<usize, usize> = HashMap::new();
    for (&c, &fine) in f.iter().zip(f_fine) {
        if *parent.entry(fine).or_insert(c) != c {
            return Err(Error::NotNested(format!("fine cell {fine} spans several coarse cells")));
        }
    }
    let total = x.len() as f64;
    let unit: Vec<(DVector<f64>, f64)> = x.iter().map(|v| (v.clone(), 1.0)).collect();
    let coarse_cells = cells(f);
    let fine_cells = cells(f_fine);
    let coarse = within(&unit, &coarse_cells, total);
    let fine = within(&unit, &fine_cells, total);

    let mut fine_keys: Vec<&usize> = fine_cells.keys().collect();
    fine_keys.sort();
    let mut points = Vec::with_capacity(fine_keys.len());
    let mut parent_labels = Vec::with_capacity(fine_keys.len());
    for key in fine_keys {
        let idx = &fine_cells[key];
        points.push((mean_of(x, idx), idx.len() as f64));
        parent_labels.push(parent[key]);
    }
    let explained = within(&points, &cells(&parent_labels), total);
    let defect = (&explained - (&coarse - &fine)).norm();
    Ok(TotalCovarianceReport { explained, coarse, fine, defect })
}
