use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("matrix at t={t} is numerically singular (condition number {cond:.3e})")]
    NonInvertible { t: usize, cond: f64 },
    #[error("invalid predictor model: {0}")]
    InvalidModel(String),
    #[error("predictor does not support this operation: {0}")]
    UnsupportedPredictor(String),
    #[error("target index {target} outside horizon {horizon}")]
    UnsupportedTarget { target: usize, horizon: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("regression is rank deficient for every ridge candidate")]
    RankDeficient,
    #[error("history features need {needed} floats, budget is {budget}")]
    HistoryFeatureOverflow { needed: usize, budget: usize },
    #[error("policy requested disturbance {requested} at time {t}")]
    InformationLeak { t: usize, requested: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("parameter norm {norm:.3e} exceeded bound {bound:.3e} at step {t}")]
    Divergence { t: usize, norm: f64, bound: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("missing certificate: {0}")]
    CertificateMissing(String),
    #[error("empty cell: {0}")]
    EmptyCell(String),
    #[error("labels are not nested: {0}")]
    NotNested(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonInvertible { .. }
                | Error::RankDeficient
                | Error::NoConvergence { .. }
                | Error::Divergence { .. }
        )
    }
}
