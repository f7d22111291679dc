use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its invariant.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Phase-field nonlinear or linear solve failed.
    #[error("solver failed at step {step}: residual norm {residual:e}")]
    Solver { step: usize, residual: f64 },

    /// Newton did not converge even after load-step bisection.
    #[error("Newton failed to converge approaching d = {target_d}; last converged d = {last_converged_d}")]
    Convergence { last_converged_d: f64, target_d: f64 },

    #[error("element {} inverted (det F = {det:e})", element.map_or("?".to_string(), |e| e.to_string()))]
    Inversion { element: Option<usize>, det: f64 },

    #[error("Poisson's ratio {nu} is not in (0, 0.5)")]
    Incompressible { nu: f64 },

    #[error("sparse factorization failed: {0}")]
    Factorization(String),

    #[error("pool too small: requested {requested} {what}, {available} available")]
    Capacity {
        what: String,
        requested: usize,
        available: usize,
    },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("training diverged: non-finite value in `{param}`")]
    Divergence { param: String },

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("R2 undefined: reference values have zero variance")]
    UndefinedR2,

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("need at least {required} samples, got {got}")]
    SampleSize { required: usize, got: usize },

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("stage `{stage}` failed (config {config_hash}, partial outputs in {partial}): {source}")]
    Stage {
        stage: String,
        config_hash: String,
        partial: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config { .. }
            | Error::Argument(_)
            | Error::Incompressible { .. }
            | Error::Capacity { .. }
            | Error::Architecture(_)
            | Error::Format { .. } => true,
            Error::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }

    /// True for numerical failures of a solver or of training.
    pub fn is_solver_error(&self) -> bool {
        match self {
            Error::Solver { .. }
            | Error::Convergence { .. }
            | Error::Inversion { .. }
            | Error::Factorization(_)
            | Error::Divergence { .. }
            | Error::NumericalDomain(_) => true,
            Error::Stage { source, .. } => source.is_solver_error(),
            _ => false,
        }
    }
}
