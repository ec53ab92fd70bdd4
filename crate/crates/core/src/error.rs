use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "admittance block Y_LL is singular or too ill-conditioned to invert (rcond {rcond:e})"
    )]
    SingularMatrix { rcond: f64 },

    #[error("feeder generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("degenerate voltage at entry {index}: denominator magnitude {magnitude:e}")]
    DegenerateVoltage { index: usize, magnitude: f64 },

    #[error("training diverged at epoch {epoch}: mean loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}
