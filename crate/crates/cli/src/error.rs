use lgp::LgpError;
use thiserror::Error;

/// Failure classes of the command-line contract; each maps to one exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration, model or request (exit 1).
    #[error("{0}")]
    Config(String),
    /// Unreadable or malformed input, unwritable output (exit 2).
    #[error("{0}")]
    Io(String),
    /// Estimation did not converge or broke down numerically (exit 3).
    #[error("{0}")]
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Estimation(_) => 3,
        }
    }
}

impl From<LgpError> for CliError {
    fn from(e: LgpError) -> Self {
        let msg = e.to_string();
        match e {
            LgpError::Io(_) | LgpError::Csv(_) | LgpError::MalformedRow { .. } | LgpError::EmptyFile { .. } => {
                CliError::Io(msg)
            }
            LgpError::NonFinite { .. }
            | LgpError::Optimizer { .. }
            | LgpError::IllConditioned { .. }
            | LgpError::NegativeVariance(_)
            | LgpError::BootstrapFailures { .. } => CliError::Estimation(msg),
            _ => CliError::Config(msg),
        }
    }
}
