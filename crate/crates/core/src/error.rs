use thiserror::Error;

/// Failure recorded on a differentiation tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("domain error in `{op}` (argument {value})")]
    Domain { op: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
