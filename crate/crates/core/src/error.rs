use thiserror::Error;

/// Errors raised anywhere in the calibration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty batch passed to {op}")]
    EmptyBatch { op: &'static str },

    #[error("backward called on {0}")]
    InvalidBackward(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("calibration diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("malformed data: {0}")]
    Parse(String),

    #[error(transparent)]
    ImpliedVol(#[from] crate::market::ImpliedVolError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
