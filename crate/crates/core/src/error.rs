use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a documented precondition (shapes, probability rows, ranges).
    #[error("validation error: {0}")]
    Validation(String),

    /// Logged data is structurally inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be parsed; `line` is 1-based when known.
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },

    /// Fixed-point iteration did not reach the tolerance.
    #[error("no convergence after {} iterations (last distance {:e})", trace.len(), trace.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { trace: Vec<f64> },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
