use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate initialization at coordinate {index}: |u| = |v| = {magnitude:e}")]
    DegenerateInitialization { index: usize, magnitude: f64 },

    #[error("step size underflow at t = {t}: {detail}")]
    Stiffness { t: f64, detail: String },

    #[error("SGD diverged at iteration {iteration} (loss {loss:e})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("inconsistent stagewise state: {0}")]
    InconsistentState(String),

    #[error("degenerate dynamics: coordinates {first} and {second} tie (Δ = {first_delta}, {second_delta})")]
    DegenerateDynamics {
        first: usize,
        second: usize,
        first_delta: f64,
        second_delta: f64,
    },

    #[error("stage {stage} did not settle within t = {max_time} (|grad| = {grad_norm:e})")]
    NonConvergentStage {
        stage: usize,
        max_time: f64,
        grad_norm: f64,
    },

    #[error("stage {stage} limit is unstable: endpoints at ε and ε/ratio differ by {distance:e}")]
    LimitUnstable { stage: usize, distance: f64 },

    #[error("stable rank is undefined for the zero matrix")]
    ZeroMatrix,

    #[error("invalid probe time {t}: {reason}")]
    InvalidProbe { t: f64, reason: String },

    #[error("nothing to test: {0}")]
    NothingToTest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for this failure class.
    ///
    /// 2 configuration, 3 assumption or degeneracy violation, 4 numeric failure, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) | Error::InvalidProbe { .. } => 2,
            Error::DegenerateInitialization { .. }
            | Error::InconsistentState(_)
            | Error::DegenerateDynamics { .. }
            | Error::NonConvergentStage { .. }
            | Error::LimitUnstable { .. }
            | Error::NothingToTest(_) => 3,
            Error::NumericOverflow(_)
            | Error::Numeric(_)
            | Error::Stiffness { .. }
            | Error::Divergence { .. }
            | Error::ZeroMatrix => 4,
            Error::Io { .. } | Error::Format { .. } => 5,
        }
    }

    /// Short machine-readable tag used in JSON error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::NumericOverflow(_) => "numeric-overflow",
            Error::Numeric(_) => "numeric",
            Error::DegenerateInitialization { .. } => "degenerate-initialization",
            Error::Stiffness { .. } => "stiffness",
            Error::Divergence { .. } => "divergence",
            Error::InconsistentState(_) => "inconsistent-state",
            Error::DegenerateDynamics { .. } => "degenerate-dynamics",
            Error::NonConvergentStage { .. } => "non-convergent-stage",
            Error::LimitUnstable { .. } => "limit-unstable",
            Error::ZeroMatrix => "zero-matrix",
            Error::InvalidProbe { .. } => "invalid-probe",
            Error::NothingToTest(_) => "nothing-to-test",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
        }
    }
}
