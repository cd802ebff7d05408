use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the model stack.
#[derive(Debug, Error)]
pub enum LgpError {
    #[error("{path}: row {row}: {message}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: file has no data rows")]
    EmptyFile { path: PathBuf },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("conflicting constraints: {0}")]
    ConflictingConstraints(String),

    #[error("time {t} outside the basis domain [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("kernel Gram matrix is ill-conditioned even at jitter {max_jitter:e}; closest points {t_a} and {t_b}")]
    IllConditioned { max_jitter: f64, t_a: f64, t_b: f64 },

    #[error("negative conditional variance {0:e} beyond round-off")]
    NegativeVariance(f64),

    #[error("empty truncation interval [{lo}, {hi})")]
    EmptyInterval { lo: f64, hi: f64 },

    #[error("response type does not match item {item}: {message}")]
    ResponseMismatch { item: usize, message: String },

    #[error("ordinal level {level} out of range for item {item} (max {max})")]
    LevelOutOfRange { item: usize, level: u32, max: u32 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite objective at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("optimizer failed in M-step at iteration {iteration}: {message}")]
    Optimizer { iteration: usize, message: String },

    #[error("bootstrap: {failed} of {total} replicates failed")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("group `{0}` has no individuals")]
    EmptyGroup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LgpError>;
