use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A non-finite value appeared in a sensitivity tensor, loss or factor.
    #[error("diverged at step {step}")]
    Diverged { step: usize },

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("gap is undefined: {0}")]
    UndefinedGap(String),

    #[error("spectrum is undefined: {0}")]
    UndefinedSpectrum(String),

    #[error("dispersion is undefined: {0}")]
    UndefinedDispersion(String),

    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
