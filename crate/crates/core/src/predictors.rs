//! Predictor families and their joint laws with the disturbances.
//!
//! Every family is generated from per-time latent draws. Slot `s` of instance
//! `i` under master seed `k` always comes from the same RNG stream, so
//! instances, or single time slices of them, can be regenerated in any order.
//!
//! | family | disturbance | prediction `v_t` |
//! |---|---|---|
//! | `Baseline` | `N(0, I)` | `0` |
//! | `AffineGaussian` | `N(0, I)` | `ρθw_t + ε_t`, `ε_t ~ N(0, I − ρ²θθᵀ)` |
//! | `ShiftedAffineGaussian` | `N(0, I)` | `ρθw_{t+1} + ε_{t+1}` |
//! | `MultiStep1D` v1 | `c⁰_t + c¹_t + c²_t` | `(c¹_t, c⁰_{t+1})` |
//! | `MultiStep1D` v2 | same | `p(c⁰_t + c¹_t) + k c⁰_{t+1}` |
//! | `BinaryPerfect` | uniform on `{±1}ⁿ` | `w_t` |

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_linear, RegressionDataset, RegressorConfig};
use crate::gaussian::{condition, condition_latent, Conditioned};
use crate::linalg::{max_eigenvalue, min_eigenvalue, psd_sqrt, symmetrize};
use crate::rng;

pub use crate::io::fmt_f64;

/// Largest horizon for which full-history conditioning tables are built.
pub const MAX_EXACT_HORIZON: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorKind {
    Baseline,
    AffineGaussian { rho: f64, theta: DMatrix<f64> },
    /// `v_t = v_{t+1}` of the inner affine predictor.
    ShiftedAffineGaussian { rho: f64, theta: DMatrix<f64> },
    MultiStep1D { variances: [f64; 3], variant: u8, gain_current: f64, gain_next: f64 },
    BinaryPerfect,
}

/// A stacked covariance over `blocks` consecutive disturbances from `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowCov {
    pub start: usize,
    pub blocks: usize,
    pub cov: DMatrix<f64>,
}

/// Conditional means `w_{τ|t}` for `τ = start .. start+means.len()`; zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanWindow {
    pub start: usize,
    pub means: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
struct ShiftTables {
    /// Indexed by `has_prev as usize * 2 + has_next as usize`.
    cases: [Conditioned; 4],
    explained: [DMatrix<f64>; 4],
}

#[derive(Debug, Clone)]
struct HistoryTable {
    /// Rows: targets `W_t` (and `W_{t+1}` if inside the horizon); columns follow
    /// [`history_layout`].
    coef: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
    explained: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictorModel {
    kind: PredictorKind,
    n: usize,
    horizon: usize,
    noise_sqrt: Option<DMatrix<f64>>,
    shift: Option<ShiftTables>,
    history_tables: OnceLock<Vec<HistoryTable>>,
}

impl PartialEq for PredictorModel {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.n == other.n && self.horizon == other.horizon
    }
}

/// One realization of every disturbance and prediction of an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    /// Prediction issued just before `t = 0`, for families that look ahead.
    pub prior: Option<DVector<f64>>,
    pub predictor: String,
}

impl ProblemInstance {
    pub fn horizon(&self) -> usize {
        self.w.len()
    }

    pub fn history(&self, t: usize) -> History<'_> {
        History::new(t, &self.w[..t], &self.v[..=t], self.prior.as_ref())
    }
}

/// The information `(w_{0..t−1}, v_{0..t})` available at time `t`.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub t: usize,
    past_w: &'a [DVector<f64>],
    past_v: &'a [DVector<f64>],
    prior: Option<&'a DVector<f64>>,
}

impl<'a> History<'a> {
    pub fn new(
        t: usize,
        past_w: &'a [DVector<f64>],
        past_v: &'a [DVector<f64>],
        prior: Option<&'a DVector<f64>>,
    ) -> Self {
        assert_eq!(past_w.len(), t, "history needs exactly t past disturbances");
        assert_eq!(past_v.len(), t + 1, "history needs exactly t+1 predictions");
        History { t, past_w, past_v, prior }
    }

    /// Realized `w_τ`; only `τ < t` is observable.
    pub fn disturbance(&self, tau: usize) -> Result<&'a DVector<f64>> {
        self.past_w.get(tau).ok_or(Error::InformationLeak { t: self.t, requested: tau })
    }

    /// Prediction `v_τ`, `τ ≤ t`.
    pub fn prediction(&self, tau: usize) -> Result<&'a DVector<f64>> {
        self.past_v.get(tau).ok_or(Error::InformationLeak { t: self.t, requested: tau })
    }

    pub fn current_prediction(&self) -> &'a DVector<f64> {
        &self.past_v[self.t]
    }

    /// `v_{t−lag}`, falling back to the pre-horizon prediction at `−1`.
    pub fn lagged_prediction(&self, lag: usize) -> Option<&'a DVector<f64>> {
        if lag <= self.t {
            Some(&self.past_v[self.t - lag])
        } else if lag == self.t + 1 {
            self.prior
        } else {
            None
        }
    }

    pub fn prior(&self) -> Option<&'a DVector<f64>> {
        self.prior
    }

    pub fn past_disturbances(&self) -> &'a [DVector<f64>] {
        self.past_w
    }

    pub fn past_predictions(&self) -> &'a [DVector<f64>] {
        self.past_v
    }
}

/// Latent draws of one time slot.
#[derive(Debug, Clone)]
pub struct Latent {
    w: DVector<f64>,
    e: DVector<f64>,
}

fn normals<R: Rng>(rng: &mut R, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.sample(StandardNormal))
}

fn scalar_unit_gains() -> (f64, f64) {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    // (A − A P H) P with A = B = R = 1 and H = 1/(1+P).
    (p, (1.0 - p / (1.0 + p)) * p)
}

impl PredictorModel {
    pub fn baseline(n: usize, horizon: usize) -> Result<Self> {
        Self::build(PredictorKind::Baseline, n, horizon)
    }

    pub fn affine_gaussian(rho: f64, theta: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let n = theta.ncols();
        Self::build(PredictorKind::AffineGaussian { rho, theta }, n, horizon)
    }

    pub fn shifted_affine_gaussian(rho: f64, theta: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let n = theta.ncols();
        Self::build(PredictorKind::ShiftedAffineGaussian { rho, theta }, n, horizon)
    }

    /// Three-component scalar family with the scalar-unit system's gains.
    pub fn multi_step_1d(variant: u8, variances: [f64; 3], horizon: usize) -> Result<Self> {
        let (gain_current, gain_next) = scalar_unit_gains();
        Self::build(PredictorKind::MultiStep1D { variances, variant, gain_current, gain_next }, 1, horizon)
    }

    pub fn binary_perfect(n: usize, horizon: usize) -> Result<Self> {
        Self::build(PredictorKind::BinaryPerfect, n, horizon)
    }

    pub fn build(kind: PredictorKind, n: usize, horizon: usize) -> Result<Self> {
        if horizon == 0 || n == 0 {
            return Err(Error::InvalidModel("horizon and dimension must be positive".into()));
        }
        let mut noise_sqrt = None;
        let mut shift = None;
        match &kind {
            PredictorKind::AffineGaussian { rho, theta } | PredictorKind::ShiftedAffineGaussian { rho, theta } => {
                validate_affine(*rho, theta, n)?;
                let d = theta.nrows();
                let noise = DMatrix::identity(d, d) - theta * theta.transpose() * (rho * rho);
                noise_sqrt = Some(psd_sqrt(&noise));
                if matches!(kind, PredictorKind::ShiftedAffineGaussian { .. }) {
                    shift = Some(shift_tables(*rho, theta));
                }
            }
            PredictorKind::MultiStep1D { variances, variant, .. } => {
                if n != 1 {
                    return Err(Error::InvalidModel("MultiStep1D is scalar".into()));
                }
                if !variances.iter().all(|v| v.is_finite() && *v > 0.0) {
                    return Err(Error::InvalidModel("component variances must be positive".into()));
                }
                if *variant != 1 && *variant != 2 {
                    return Err(Error::InvalidModel(format!("variant must be 1 or 2, got {variant}")));
                }
            }
            PredictorKind::Baseline | PredictorKind::BinaryPerfect => {}
        }
        Ok(PredictorModel { kind, n, horizon, noise_sqrt, shift, history_tables: OnceLock::new() })
    }

    pub fn kind(&self) -> &PredictorKind {
        &self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Same family with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::build(self.kind.clone(), self.n, horizon)
    }

    /// Prediction dimension.
    pub fn d(&self) -> usize {
        match &self.kind {
            PredictorKind::AffineGaussian { theta, .. } | PredictorKind::ShiftedAffineGaussian { theta, .. } => {
                theta.nrows()
            }
            PredictorKind::MultiStep1D { variant: 1, .. } => 2,
            PredictorKind::MultiStep1D { .. } => 1,
            PredictorKind::Baseline | PredictorKind::BinaryPerfect => self.n,
        }
    }

    pub fn has_prior(&self) -> bool {
        matches!(self.kind, PredictorKind::MultiStep1D { variant: 1, .. })
    }

    pub fn label(&self) -> String {
        match &self.kind {
            PredictorKind::Baseline => "baseline".into(),
            PredictorKind::AffineGaussian { rho, .. } => format!("affine-gaussian(rho={rho})"),
            PredictorKind::ShiftedAffineGaussian { rho, .. } => format!("shifted-affine-gaussian(rho={rho})"),
            PredictorKind::MultiStep1D { variant, .. } => format!("multistep-1d(v{variant})"),
            PredictorKind::BinaryPerfect => "binary-perfect".into(),
        }
    }

    /// Unconditional covariance of a single disturbance.
    pub fn disturbance_cov(&self) -> DMatrix<f64> {
        match &self.kind {
            PredictorKind::MultiStep1D { variances, .. } => {
                DMatrix::from_element(1, 1, variances.iter().sum::<f64>())
            }
            _ => DMatrix::identity(self.n, self.n),
        }
    }

    /// Latent draws of slot `s ∈ {−1, …, T}`.
    pub fn latent(&self, seed: u64, index: u64, s: i64) -> Latent {
        let mut rng = rng::stream(seed, index, (s + 1) as u64);
        match &self.kind {
            PredictorKind::Baseline => Latent { w: normals(&mut rng, self.n), e: DVector::zeros(0) },
            PredictorKind::AffineGaussian { .. } | PredictorKind::ShiftedAffineGaussian { .. } => {
                let w = normals(&mut rng, self.n);
                let z = normals(&mut rng, self.d());
                let e = self.noise_sqrt.as_ref().expect("affine noise factor") * z;
                Latent { w, e }
            }
            PredictorKind::MultiStep1D { variances, .. } => {
                let z = normals(&mut rng, 3);
                Latent { w: DVector::from_fn(3, |i, _| z[i] * variances[i].sqrt()), e: DVector::zeros(0) }
            }
            PredictorKind::BinaryPerfect => Latent {
                w: DVector::from_fn(self.n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }),
                e: DVector::zeros(0),
            },
        }
    }

    fn w_of(&self, l: &Latent) -> DVector<f64> {
        match &self.kind {
            PredictorKind::MultiStep1D { .. } => DVector::from_element(1, l.w.sum()),
            _ => l.w.clone(),
        }
    }

    fn v_of(&self, cur: &Latent, next: &Latent) -> DVector<f64> {
        match &self.kind {
            PredictorKind::Baseline => DVector::zeros(self.n),
            PredictorKind::AffineGaussian { rho, theta } => theta * &cur.w * *rho + &cur.e,
            PredictorKind::ShiftedAffineGaussian { rho, theta } => theta * &next.w * *rho + &next.e,
            PredictorKind::MultiStep1D { variant: 1, .. } => DVector::from_vec(vec![cur.w[1], next.w[0]]),
            PredictorKind::MultiStep1D { gain_current, gain_next, .. } => {
                DVector::from_element(1, gain_current * (cur.w[0] + cur.w[1]) + gain_next * next.w[0])
            }
            PredictorKind::BinaryPerfect => cur.w.clone(),
        }
    }

    /// `w_t` of instance `index`, regenerated from its latent slot.
    pub fn disturbance_at(&self, seed: u64, index: u64, t: usize) -> DVector<f64> {
        self.w_of(&self.latent(seed, index, t as i64))
    }

    /// `v_t` of instance `index`; `t = −1` gives the pre-horizon prediction.
    pub fn prediction_at(&self, seed: u64, index: u64, t: i64) -> DVector<f64> {
        let cur = self.latent(seed, index, t);
        let needs_next = matches!(
            self.kind,
            PredictorKind::ShiftedAffineGaussian { .. } | PredictorKind::MultiStep1D { .. }
        );
        if needs_next {
            let next = self.latent(seed, index, t + 1);
            self.v_of(&cur, &next)
        } else {
            self.v_of(&cur, &cur)
        }
    }

    /// Conditional means of the disturbances given a history.
    pub fn conditional_means(&self, h: &History) -> Result<MeanWindow> {
        let t = h.t;
        if t >= self.horizon {
            return Err(Error::UnsupportedTarget { target: t, horizon: self.horizon });
        }
        let has_next = t + 1 < self.horizon;
        let means = match &self.kind {
            PredictorKind::Baseline => Vec::new(),
            PredictorKind::AffineGaussian { rho, theta } => {
                vec![theta.transpose() * h.current_prediction() * *rho]
            }
            PredictorKind::ShiftedAffineGaussian { .. } => {
                let tables = self.shift.as_ref().expect("shift tables");
                let has_prev = t >= 1;
                let c = &tables.cases[has_prev as usize * 2 + has_next as usize];
                let mut obs = Vec::new();
                if has_prev {
                    obs.extend(h.prediction(t - 1)?.iter());
                }
                obs.extend(h.current_prediction().iter());
                let m = &c.coef * DVector::from_vec(obs);
                split_blocks(&m, self.n)
            }
            PredictorKind::MultiStep1D { variant: 1, .. } => {
                let v = h.current_prediction();
                let prev = h.lagged_prediction(1).ok_or_else(|| {
                    Error::InvalidArgument("history lacks the pre-horizon prediction".into())
                })?;
                let mut out = vec![DVector::from_element(1, prev[1] + v[0])];
                if has_next {
                    out.push(DVector::from_element(1, v[1]));
                }
                out
            }
            PredictorKind::MultiStep1D { .. } => {
                let table = &self.history_tables()?[t];
                let obs = history_obs(h, self.has_prior());
                split_blocks(&(&table.coef * obs), 1)
            }
            PredictorKind::BinaryPerfect => vec![h.current_prediction().clone()],
        };
        Ok(MeanWindow { start: t, means })
    }

    /// `Cov(W_τ | I_t)` for `τ ≥ t`.
    pub fn conditional_cov(&self, t: usize, tau: usize) -> Result<DMatrix<f64>> {
        if tau >= self.horizon || t >= self.horizon {
            return Err(Error::UnsupportedTarget { target: tau.max(t), horizon: self.horizon });
        }
        if tau < t {
            return Err(Error::InvalidArgument(format!("target {tau} precedes time {t}")));
        }
        let full = self.disturbance_cov();
        if let Some((_, wc_cond)) = self.residual_covariances(t)? {
            if tau < wc_cond.start + wc_cond.blocks {
                let j = tau - wc_cond.start;
                let n = self.n;
                return Ok(wc_cond.cov.view((j * n, j * n), (n, n)).into_owned());
            }
        }
        Ok(full)
    }

    /// Covariance of the stacked nonzero conditional means at time `t`.
    pub fn explained_covariance(&self, t: usize) -> Result<Option<WindowCov>> {
        if t >= self.horizon {
            return Err(Error::UnsupportedTarget { target: t, horizon: self.horizon });
        }
        let has_next = t + 1 < self.horizon;
        Ok(match &self.kind {
            PredictorKind::Baseline => None,
            PredictorKind::AffineGaussian { rho, theta } => Some(WindowCov {
                start: t,
                blocks: 1,
                cov: symmetrize(&(theta.transpose() * theta * (rho * rho))),
            }),
            PredictorKind::ShiftedAffineGaussian { .. } => {
                let tables = self.shift.as_ref().expect("shift tables");
                let idx = (t >= 1) as usize * 2 + has_next as usize;
                Some(WindowCov { start: t, blocks: 1 + has_next as usize, cov: tables.explained[idx].clone() })
            }
            PredictorKind::MultiStep1D { variances, variant: 1, .. } => {
                let mut diag = vec![variances[0] + variances[1]];
                if has_next {
                    diag.push(variances[0]);
                }
                Some(WindowCov {
                    start: t,
                    blocks: diag.len(),
                    cov: DMatrix::from_diagonal(&DVector::from_vec(diag)),
                })
            }
            PredictorKind::MultiStep1D { .. } => {
                let table = &self.history_tables()?[t];
                Some(WindowCov { start: t, blocks: table.explained.nrows(), cov: table.explained.clone() })
            }
            PredictorKind::BinaryPerfect => Some(WindowCov { start: t, blocks: 1, cov: DMatrix::identity(self.n, self.n) }),
        })
    }

    /// Unconditional and conditional joint covariances of the disturbances on
    /// the window where they differ.
    pub fn residual_covariances(&self, t: usize) -> Result<Option<(WindowCov, WindowCov)>> {
        if t >= self.horizon {
            return Err(Error::UnsupportedTarget { target: t, horizon: self.horizon });
        }
        let has_next = t + 1 < self.horizon;
        let blockdiag = |k: usize, blk: &DMatrix<f64>| {
            let n = blk.nrows();
            let mut m = DMatrix::zeros(k * n, k * n);
            for j in 0..k {
                m.view_mut((j * n, j * n), (n, n)).copy_from(blk);
            }
            m
        };
        let full = self.disturbance_cov();
        let cond = match &self.kind {
            PredictorKind::Baseline => return Ok(None),
            PredictorKind::AffineGaussian { rho, theta } => WindowCov {
                start: t,
                blocks: 1,
                cov: symmetrize(&(DMatrix::identity(self.n, self.n) - theta.transpose() * theta * (rho * rho))),
            },
            PredictorKind::ShiftedAffineGaussian { .. } => {
                let tables = self.shift.as_ref().expect("shift tables");
                let c = &tables.cases[(t >= 1) as usize * 2 + has_next as usize];
                WindowCov { start: t, blocks: 1 + has_next as usize, cov: c.cov.clone() }
            }
            PredictorKind::MultiStep1D { variances, variant: 1, .. } => {
                let mut diag = vec![variances[2]];
                if has_next {
                    diag.push(variances[1] + variances[2]);
                }
                WindowCov { start: t, blocks: diag.len(), cov: DMatrix::from_diagonal(&DVector::from_vec(diag)) }
            }
            PredictorKind::MultiStep1D { .. } => {
                let table = &self.history_tables()?[t];
                WindowCov { start: t, blocks: table.cond_cov.nrows(), cov: table.cond_cov.clone() }
            }
            PredictorKind::BinaryPerfect => {
                WindowCov { start: t, blocks: 1, cov: DMatrix::zeros(self.n, self.n) }
            }
        };
        let base = WindowCov { start: t, blocks: cond.blocks, cov: blockdiag(cond.blocks, &full) };
        Ok(Some((base, cond)))
    }

    fn history_tables(&self) -> Result<&Vec<HistoryTable>> {
        if self.horizon > MAX_EXACT_HORIZON {
            return Err(Error::UnsupportedPredictor(format!(
                "full-history conditioning limited to horizon {MAX_EXACT_HORIZON}"
            )));
        }
        Ok(self.history_tables.get_or_init(|| {
            (0..self.horizon)
                .map(|t| {
                    let c = multistep_conditioning(&self.kind, self.horizon, t);
                    let explained = symmetrize(&(c.prior_cov.clone() - &c.cond.cov));
                    HistoryTable { coef: c.cond.coef, cond_cov: c.cond.cov, explained }
                })
                .collect()
        }))
    }
}

fn split_blocks(m: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    (0..m.len() / n).map(|j| m.rows(j * n, n).into_owned()).collect()
}

fn validate_affine(rho: f64, theta: &DMatrix<f64>, n: usize) -> Result<()> {
    let rho_max = std::f64::consts::FRAC_1_SQRT_2;
    if !(0.0..=rho_max + 1e-12).contains(&rho) {
        return Err(Error::InvalidModel(format!("rho = {rho} outside [0, √2/2]")));
    }
    if theta.ncols() != n || theta.nrows() == 0 {
        return Err(Error::InvalidModel("theta must be d×n".into()));
    }
    let gram = theta * theta.transpose();
    let top = max_eigenvalue(&gram);
    if top > 2.0 + 1e-12 {
        return Err(Error::InvalidModel(format!("θθᵀ has eigenvalue {top:.6} above 2")));
    }
    let noise = DMatrix::identity(theta.nrows(), theta.nrows()) - gram * (rho * rho);
    if min_eigenvalue(&noise) < -1e-12 {
        return Err(Error::InvalidModel("noise covariance I − ρ²θθᵀ is not PSD".into()));
    }
    Ok(())
}

/// Conditioning tables for `(W_t, W_{t+1})` given `(V_{t−1}, V_t)`.
fn shift_tables(rho: f64, theta: &DMatrix<f64>) -> ShiftTables {
    let (d, n) = theta.shape();
    // Order: W_t, W_{t+1}, V_{t−1}, V_t.
    let dim = 2 * n + 2 * d;
    let mut joint = DMatrix::zeros(dim, dim);
    joint.view_mut((0, 0), (2 * n, 2 * n)).fill_with_identity();
    joint.view_mut((2 * n, 2 * n), (2 * d, 2 * d)).fill_with_identity();
    let cross = theta * rho;
    joint.view_mut((2 * n, 0), (d, n)).copy_from(&cross);
    joint.view_mut((0, 2 * n), (n, d)).copy_from(&cross.transpose());
    joint.view_mut((2 * n + d, n), (d, n)).copy_from(&cross);
    joint.view_mut((n, 2 * n + d), (n, d)).copy_from(&cross.transpose());
    let build = |has_prev: bool, has_next: bool| {
        let targets: Vec<usize> = (0..n).chain(if has_next { n..2 * n } else { 0..0 }).collect();
        let obs: Vec<usize> =
            (if has_prev { 2 * n..2 * n + d } else { 0..0 }).chain(2 * n + d..2 * n + 2 * d).collect();
        let c = condition(&joint, &targets, &obs);
        let oo = DMatrix::from_fn(obs.len(), obs.len(), |i, j| joint[(obs[i], obs[j])]);
        let explained = symmetrize(&(&c.coef * oo * c.coef.transpose()));
        (c, explained)
    };
    let (c0, e0) = build(false, false);
    let (c1, e1) = build(false, true);
    let (c2, e2) = build(true, false);
    let (c3, e3) = build(true, true);
    ShiftTables { cases: [c0, c1, c2, c3], explained: [e0, e1, e2, e3] }
}

pub(crate) struct MultiStepConditioning {
    pub cond: Conditioned,
    pub prior_cov: DMatrix<f64>,
}

/// Observation layout at time `t`: `w_0..w_{t−1}`, the pre-horizon prediction
/// (if any), then `v_0..v_t`, each flattened.
pub(crate) fn history_obs(h: &History, with_prior: bool) -> DVector<f64> {
    let mut obs = Vec::new();
    for w in h.past_disturbances() {
        obs.extend(w.iter());
    }
    if with_prior {
        obs.extend(h.prior().expect("pre-horizon prediction").iter());
    }
    for v in h.past_predictions() {
        obs.extend(v.iter());
    }
    DVector::from_vec(obs)
}

/// Exact Gaussian conditioning of `(W_t, W_{t+1})` on the full history of a
/// `MultiStep1D` model, through its latent components.
pub(crate) fn multistep_conditioning(kind: &PredictorKind, horizon: usize, t: usize) -> MultiStepConditioning {
    let PredictorKind::MultiStep1D { variances, variant, gain_current, gain_next } = kind else {
        panic!("multistep_conditioning on another family");
    };
    // Slots −1 ..= t+1, three components each.
    let slots = t + 3;
    let col = |s: i64, c: usize| ((s + 1) as usize) * 3 + c;
    let nz = slots * 3;
    let var: Vec<f64> = (0..nz).map(|i| variances[i % 3]).collect();
    let has_next = t + 1 < horizon;
    let nt = 1 + has_next as usize;
    let mut tmap = DMatrix::zeros(nt, nz);
    for c in 0..3 {
        tmap[(0, col(t as i64, c))] = 1.0;
        if has_next {
            tmap[(1, col(t as i64 + 1, c))] = 1.0;
        }
    }
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    for s in 0..t as i64 {
        rows.push((0..3).map(|c| (col(s, c), 1.0)).collect());
    }
    let pred_rows = |s: i64| -> Vec<Vec<(usize, f64)>> {
        if *variant == 1 {
            vec![vec![(col(s, 1), 1.0)], vec![(col(s + 1, 0), 1.0)]]
        } else {
            vec![vec![(col(s, 0), *gain_current), (col(s, 1), *gain_current), (col(s + 1, 0), *gain_next)]]
        }
    };
    if *variant == 1 {
        rows.extend(pred_rows(-1));
    }
    for s in 0..=t as i64 {
        rows.extend(pred_rows(s));
    }
    let mut omap = DMatrix::zeros(rows.len(), nz);
    for (i, r) in rows.iter().enumerate() {
        for &(j, v) in r {
            omap[(i, j)] += v;
        }
    }
    let cond = condition_latent(&var, &tmap, &omap);
    let total: f64 = variances.iter().sum();
    MultiStepConditioning { cond, prior_cov: DMatrix::identity(nt, nt) * total }
}

/// Samples instance `index` under `master`.
pub fn sample_instance_indexed(model: &PredictorModel, master: u64, index: u64) -> ProblemInstance {
    let horizon = model.horizon;
    let latents: Vec<Latent> = (-1..=horizon as i64).map(|s| model.latent(master, index, s)).collect();
    let at = |s: i64| &latents[(s + 1) as usize];
    let w = (0..horizon).map(|t| model.w_of(at(t as i64))).collect();
    let v = (0..horizon).map(|t| model.v_of(at(t as i64), at(t as i64 + 1))).collect();
    let prior = model.has_prior().then(|| model.v_of(at(-1), at(0)));
    ProblemInstance { w, v, prior, predictor: model.label() }
}

/// Samples one instance; deterministic given the seed.
pub fn sample_instance(model: &PredictorModel, seed: u64) -> ProblemInstance {
    sample_instance_indexed(model, seed, 0)
}

pub fn sample_instances(model: &PredictorModel, master: u64, count: usize) -> Vec<ProblemInstance> {
    use rayon::prelude::*;
    (0..count as u64).into_par_iter().map(|i| sample_instance_indexed(model, master, i)).collect()
}

/// `E[W_τ | I_t = h]`.
pub fn conditional_mean_w(model: &PredictorModel, h: &History, tau: usize) -> Result<DVector<f64>> {
    if tau >= model.horizon {
        return Err(Error::UnsupportedTarget { target: tau, horizon: model.horizon });
    }
    if tau < h.t {
        return Err(Error::InvalidArgument(format!("target {tau} precedes time {}", h.t)));
    }
    let win = model.conditional_means(h)?;
    Ok(tau
        .checked_sub(win.start)
        .and_then(|j| win.means.get(j).cloned())
        .unwrap_or_else(|| DVector::zeros(model.n)))
}

/// `Cov(W_τ | I_t)`.
pub fn conditional_cov_w(model: &PredictorModel, t: usize, tau: usize) -> Result<DMatrix<f64>> {
    model.conditional_cov(t, tau)
}

/// Random access to instance data, in memory or regenerated on demand.
pub trait InstanceSource: Sync {
    fn count(&self) -> usize;
    fn horizon(&self) -> usize;
    fn n(&self) -> usize;
    fn d(&self) -> usize;
    fn disturbance(&self, i: usize, t: usize) -> DVector<f64>;
    fn prediction(&self, i: usize, t: usize) -> DVector<f64>;
    fn prior(&self, i: usize) -> Option<DVector<f64>>;
}

impl InstanceSource for [ProblemInstance] {
    fn count(&self) -> usize {
        self.len()
    }
    fn horizon(&self) -> usize {
        self.first().map_or(0, |x| x.w.len())
    }
    fn n(&self) -> usize {
        self.first().map_or(0, |x| x.w[0].len())
    }
    fn d(&self) -> usize {
        self.first().map_or(0, |x| x.v[0].len())
    }
    fn disturbance(&self, i: usize, t: usize) -> DVector<f64> {
        self[i].w[t].clone()
    }
    fn prediction(&self, i: usize, t: usize) -> DVector<f64> {
        self[i].v[t].clone()
    }
    fn prior(&self, i: usize) -> Option<DVector<f64>> {
        self[i].prior.clone()
    }
}

/// Instances `0..count` of a model, regenerated slice by slice.
#[derive(Debug, Clone)]
pub struct SampledInstances<'a> {
    pub model: &'a PredictorModel,
    pub seed: u64,
    pub count: usize,
}

impl InstanceSource for SampledInstances<'_> {
    fn count(&self) -> usize {
        self.count
    }
    fn horizon(&self) -> usize {
        self.model.horizon
    }
    fn n(&self) -> usize {
        self.model.n
    }
    fn d(&self) -> usize {
        self.model.d()
    }
    fn disturbance(&self, i: usize, t: usize) -> DVector<f64> {
        self.model.disturbance_at(self.seed, i as u64, t)
    }
    fn prediction(&self, i: usize, t: usize) -> DVector<f64> {
        self.model.prediction_at(self.seed, i as u64, t as i64)
    }
    fn prior(&self, i: usize) -> Option<DVector<f64>> {
        self.model.has_prior().then(|| self.model.prediction_at(self.seed, i as u64, -1))
    }
}

/// Per-entry test MSE of a linear regression from `v_t` to `w_t`, pooling the
/// given time steps of every instance.
pub fn mse_per_entry<S: InstanceSource + ?Sized>(
    source: &S,
    steps: &[usize],
    config: &RegressorConfig,
) -> Result<DVector<f64>> {
    let (n, d) = (source.n(), source.d());
    let rows = source.count() * steps.len();
    if rows < 100 {
        return Err(Error::InsufficientData(format!("{rows} rows, need at least 100")));
    }
    let mut x = DMatrix::zeros(rows, d);
    let mut y = DMatrix::zeros(rows, n);
    // Instance-major order keeps every split a set of whole instances.
    for i in 0..source.count() {
        for (k, &t) in steps.iter().enumerate() {
            let r = i * steps.len() + k;
            x.row_mut(r).copy_from(&source.prediction(i, t).transpose());
            y.row_mut(r).copy_from(&source.disturbance(i, t).transpose());
        }
    }
    let ds = RegressionDataset::new(x, y, config.split)?;
    let fit = fit_linear(&ds, config)?;
    let (test_x, test_y) = ds.test();
    let resid = &test_y - fit.predict(&test_x);
    Ok(DVector::from_fn(n, |j, _| resid.column(j).norm_squared() / resid.nrows() as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetHeader {
    pub horizon: usize,
    pub n: usize,
    pub d: usize,
    pub count: usize,
    pub seed: u64,
    pub has_prior: bool,
    pub predictor: String,
}

/// Writes `<stem>.bin` (row-major float64, per instance and per step
/// `[w_t, v_t]`, then all priors) and a `<stem>.json` sidecar.
pub fn write_dataset(stem: &Path, instances: &[ProblemInstance], seed: u64) -> Result<DatasetHeader> {
    let first = instances.first().ok_or_else(|| Error::InsufficientData("empty dataset".into()))?;
    let header = DatasetHeader {
        horizon: first.horizon(),
        n: first.w[0].len(),
        d: first.v[0].len(),
        count: instances.len(),
        seed,
        has_prior: first.prior.is_some(),
        predictor: first.predictor.clone(),
    };
    let mut bytes = Vec::with_capacity(instances.len() * header.horizon * (header.n + header.d) * 8);
    for inst in instances {
        for t in 0..header.horizon {
            for x in inst.w[t].iter().chain(inst.v[t].iter()) {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    if header.has_prior {
        for inst in instances {
            for x in inst.prior.as_ref().expect("prior").iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    crate::io::write_atomic(&stem.with_extension("bin"), &bytes)?;
    crate::io::write_atomic(&stem.with_extension("json"), serde_json::to_string_pretty(&header)?.as_bytes())?;
    Ok(header)
}

pub fn read_dataset(stem: &Path) -> Result<(DatasetHeader, Vec<ProblemInstance>)> {
    let header: DatasetHeader = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
    let bytes = std::fs::read(stem.with_extension("bin"))?;
    let floats: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let (t_, n, d) = (header.horizon, header.n, header.d);
    let body = header.count * t_ * (n + d);
    let expected = body + if header.has_prior { header.count * d } else { 0 };
    if floats.len() != expected {
        return Err(Error::Io(format!("dataset has {} floats, header implies {expected}", floats.len())));
    }
    let mut out = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let mut w = Vec::with_capacity(t_);
        let mut v = Vec::with_capacity(t_);
        for t in 0..t_ {
            let off = (i * t_ + t) * (n + d);
            w.push(DVector::from_column_slice(&floats[off..off + n]));
            v.push(DVector::from_column_slice(&floats[off + n..off + n + d]));
        }
        let prior = header.has_prior.then(|| {
            let off = body + i * d;
            DVector::from_column_slice(&floats[off..off + d])
        });
        out.push(ProblemInstance { w, v, prior, predictor: header.predictor.clone() });
    }
    Ok((header, out))
}
