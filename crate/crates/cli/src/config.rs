//! JSON experiment configuration.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use predpower::bounds::CheckBudget;
use predpower::estimation::HistoryWindow;
use predpower::lqr::{dare, LtvSystem};
use predpower::predictors::PredictorModel;
use predpower::presets;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Row-major matrix as nested arrays.
pub type Rows = Vec<Vec<f64>>;

fn matrix(rows: &Rows, field: &str) -> CliResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!("{field}: expected a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
    /// Defaults to the stationary Riccati solution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_terminal: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl SystemSpec {
    pub fn preset(name: &str, horizon: usize) -> Self {
        SystemSpec { preset: Some(name.into()), horizon, a: None, b: None, q: None, r: None, p_terminal: None, x0: None }
    }

    pub fn build(&self) -> CliResult<LtvSystem> {
        if self.horizon == 0 {
            return Err(CliError::Config("system.horizon must be positive".into()));
        }
        if let Some(name) = &self.preset {
            if self.a.is_some() || self.b.is_some() || self.q.is_some() || self.r.is_some() {
                return Err(CliError::Config("system: give either preset or matrices, not both".into()));
            }
            let mut sys = presets::by_name(name, self.horizon)
                .ok_or_else(|| CliError::Config(format!("system.preset: unknown preset {name:?}")))??;
            if let Some(x0) = &self.x0 {
                sys.x0 = DVector::from_vec(x0.clone());
            }
            if let Some(p) = &self.p_terminal {
                sys.p_terminal = matrix(p, "system.p_terminal")?;
            }
            return Ok(sys);
        }
        let need = |m: &Option<Rows>, field: &str| -> CliResult<DMatrix<f64>> {
            let full = format!("system.{field}");
            matrix(m.as_ref().ok_or_else(|| CliError::Config(format!("{full} is required without a preset")))?, &full)
        };
        let (a, b, q, r) = (need(&self.a, "a")?, need(&self.b, "b")?, need(&self.q, "q")?, need(&self.r, "r")?);
        let p = match &self.p_terminal {
            Some(p) => matrix(p, "system.p_terminal")?,
            None => dare(&a, &b, &q, &r)?,
        };
        let x0 = DVector::from_vec(self.x0.clone().unwrap_or_else(|| vec![0.0; a.nrows()]));
        Ok(LtvSystem::time_invariant(a, b, q, r, p, x0, self.horizon)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaSpec {
    /// `"identity"` or `"rotated"`.
    Named(String),
    Matrix(Rows),
}

impl ThetaSpec {
    pub fn build(&self, n: usize) -> CliResult<DMatrix<f64>> {
        match self {
            ThetaSpec::Named(name) => match name.as_str() {
                "identity" => Ok(DMatrix::identity(n, n)),
                "rotated" if n == 2 => Ok(presets::rotated_theta()),
                "rotated" => Err(CliError::Config("predictor.theta: \"rotated\" needs n = 2".into())),
                other => Err(CliError::Config(format!("predictor.theta: unknown name {other:?}"))),
            },
            ThetaSpec::Matrix(rows) => matrix(rows, "predictor.theta"),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ThetaSpec::Named(name) => name.clone(),
            ThetaSpec::Matrix(_) => "custom".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    Baseline,
    AffineGaussian { rho: f64, theta: ThetaSpec },
    ShiftedAffineGaussian { rho: f64, theta: ThetaSpec },
    MultiStep1d {
        variant: u8,
        #[serde(default = "unit_variances")]
        variances: [f64; 3],
    },
    BinaryPerfect,
}

fn unit_variances() -> [f64; 3] {
    [1.0; 3]
}

impl PredictorSpec {
    pub fn build(&self, n: usize, horizon: usize) -> CliResult<PredictorModel> {
        Ok(match self {
            PredictorSpec::Baseline => PredictorModel::baseline(n, horizon)?,
            PredictorSpec::AffineGaussian { rho, theta } => PredictorModel::affine_gaussian(*rho, theta.build(n)?, horizon)?,
            PredictorSpec::ShiftedAffineGaussian { rho, theta } => {
                PredictorModel::shifted_affine_gaussian(*rho, theta.build(n)?, horizon)?
            }
            PredictorSpec::MultiStep1d { variant, variances } => PredictorModel::multi_step_1d(*variant, *variances, horizon)?,
            PredictorSpec::BinaryPerfect => PredictorModel::binary_perfect(n, horizon)?,
        })
    }
}

/// Acceptance thresholds; every field can be overridden from the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Allowed gap between Monte Carlo and exact values, in standard errors.
    pub sigma: f64,
    /// Relative gap between Monte Carlo power and its closed form.
    pub mc_relative: f64,
    /// Relative gap between the regression estimate and the closed form.
    pub estimate_relative: f64,
    /// Largest per-entry MSE difference counted as equal.
    pub mse_agreement: f64,
    /// Smallest `|P(θ₁)/P(θ₂) − 1|` counted as a real difference.
    pub power_ratio_gap: f64,
    /// Mutual agreement of two estimated powers, in combined standard errors.
    pub power_agreement_sigma: f64,
    /// Separation of two MSEs, in combined standard errors.
    pub mse_separation_sigma: f64,
    /// Relative band around the reference for the late online improvement.
    pub online_relative: f64,
    /// Largest late improvement, as a fraction of the reference, for a
    /// plateau below it.
    pub plateau_fraction: f64,
    /// Absolute tolerance for exact comparisons.
    pub absolute: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            sigma: 3.0,
            mc_relative: 0.05,
            estimate_relative: 0.10,
            mse_agreement: 1e-3,
            power_ratio_gap: 0.10,
            power_agreement_sigma: 2.0,
            mse_separation_sigma: 3.0,
            online_relative: 0.15,
            plateau_fraction: 0.70,
            absolute: 1e-9,
        }
    }
}

fn default_count() -> usize {
    10_000
}

fn default_rhos() -> Vec<f64> {
    (0..=7).map(|k| k as f64 / 10.0).collect()
}

fn default_thetas() -> Vec<ThetaSpec> {
    vec![ThetaSpec::Named("identity".into()), ThetaSpec::Named("rotated".into())]
}

fn default_half() -> f64 {
    0.5
}

fn default_identity() -> ThetaSpec {
    ThetaSpec::Named("identity".into())
}

fn default_mgaps_system() -> SystemSpec {
    SystemSpec::preset("double-integrator", 20_000)
}

fn default_replicates() -> usize {
    10
}

fn default_record_every() -> usize {
    100
}

fn default_eta0() -> f64 {
    0.003
}

fn default_p() -> f64 {
    0.1
}

fn default_grid() -> usize {
    100
}

fn default_window_fraction() -> f64 {
    0.1
}

fn default_mse_steps() -> Vec<usize> {
    vec![0, 25, 50, 75, 99]
}

fn default_nodes() -> usize {
    40
}

fn default_instances() -> Vec<BoundInstance> {
    vec![BoundInstance::LqrToy, BoundInstance::BinaryExample, BoundInstance::NonquadraticToy]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundInstance {
    LqrToy,
    BinaryExample,
    NonquadraticToy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentSpec {
    Riccati {
        system: SystemSpec,
    },
    PowerClosedForm {
        system: SystemSpec,
        predictor: PredictorSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect: Option<f64>,
    },
    PowerMc {
        system: SystemSpec,
        predictor: PredictorSpec,
        #[serde(default = "default_count")]
        count: usize,
    },
    PowerEstimate {
        system: SystemSpec,
        predictor: PredictorSpec,
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default)]
        window: HistoryWindow,
        /// Stem of a stored dataset to read instead of sampling.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dataset: Option<PathBuf>,
    },
    MseSweep {
        system: SystemSpec,
        #[serde(default = "default_rhos")]
        rhos: Vec<f64>,
        #[serde(default = "default_thetas")]
        thetas: Vec<ThetaSpec>,
        /// Training rows for each MSE fit.
        train_samples: usize,
        /// Held-out rows for each MSE; defaults to the standard split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_samples: Option<usize>,
    },
    #[serde(rename = "multistep-1d")]
    MultiStep1d {
        horizon: usize,
        /// Instances for the power estimates.
        power_count: usize,
        /// Test rows for each per-step MSE.
        test_samples: usize,
        #[serde(default = "default_mse_steps")]
        mse_steps: Vec<usize>,
    },
    Mgaps {
        #[serde(default = "default_mgaps_system")]
        system: SystemSpec,
        /// 1: current prediction; 2: one step ahead.
        scenario: u8,
        #[serde(default = "default_half")]
        rho: f64,
        #[serde(default = "default_identity")]
        theta: ThetaSpec,
        #[serde(default = "default_replicates")]
        replicates: usize,
        #[serde(default = "default_record_every")]
        record_every: usize,
        #[serde(default = "default_eta0")]
        eta0: f64,
        #[serde(default = "default_window_fraction")]
        window_fraction: f64,
    },
    Counterexample {
        #[serde(default = "default_p")]
        p: f64,
        /// Grid `k/grid` for `k = 1, …, grid − 1`.
        #[serde(default = "default_grid")]
        grid: usize,
    },
    Bounds {
        #[serde(default = "default_instances")]
        instances: Vec<BoundInstance>,
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default)]
        budget: CheckBudget,
        #[serde(default = "default_nodes")]
        nodes: usize,
    },
    Selftest,
}

impl ExperimentSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentSpec::Riccati { .. } => "riccati",
            ExperimentSpec::PowerClosedForm { .. } => "power-closed-form",
            ExperimentSpec::PowerMc { .. } => "power-mc",
            ExperimentSpec::PowerEstimate { .. } => "power-estimate",
            ExperimentSpec::MseSweep { .. } => "mse-sweep",
            ExperimentSpec::MultiStep1d { .. } => "multistep-1d",
            ExperimentSpec::Mgaps { .. } => "mgaps",
            ExperimentSpec::Counterexample { .. } => "counterexample",
            ExperimentSpec::Bounds { .. } => "bounds",
            ExperimentSpec::Selftest => "selftest",
        }
    }
}

/// Keys shared by every experiment; the rest of the document selects and
/// parameterizes the experiment.
const COMMON: [&str; 3] = ["seed", "output_dir", "tolerances"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub tolerances: Tolerances,
    pub spec: ExperimentSpec,
}

impl ExperimentConfig {
    pub fn new(spec: ExperimentSpec) -> Self {
        ExperimentConfig { seed: None, output_dir: None, tolerances: Tolerances::default(), spec }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> CliResult<Self> {
        let Value::Object(mut map) = value else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let field = |e: serde_json::Error, name: &str| CliError::Config(format!("{name}: {e}"));
        let seed = match map.remove("seed") {
            None | Some(Value::Null) => None,
            Some(v) => Some(serde_json::from_value(v).map_err(|e| field(e, "seed"))?),
        };
        let output_dir = match map.remove("output_dir") {
            None | Some(Value::Null) => None,
            Some(v) => Some(serde_json::from_value(v).map_err(|e| field(e, "output_dir"))?),
        };
        let tolerances = match map.remove("tolerances") {
            None => Tolerances::default(),
            Some(v) => serde_json::from_value(v).map_err(|e| field(e, "tolerances"))?,
        };
        let spec = serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(ExperimentConfig { seed, output_dir, tolerances, spec })
    }

    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.spec) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        if let Some(seed) = self.seed {
            map.insert(COMMON[0].into(), seed.into());
        }
        if let Some(dir) = &self.output_dir {
            map.insert(COMMON[1].into(), Value::String(dir.display().to_string()));
        }
        map.insert(COMMON[2].into(), serde_json::to_value(&self.tolerances).unwrap_or(Value::Null));
        Value::Object(map)
    }
}

pub fn window_label(w: &HistoryWindow) -> String {
    match w {
        HistoryWindow::Recent { predictions, disturbances } => format!("recent({predictions},{disturbances})"),
        HistoryWindow::Full => "full".into(),
    }
}
