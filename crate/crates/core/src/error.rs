use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An embedding or center is too close to the origin to normalize.
    #[error("degenerate {what} at index {index}: norm {norm:e}")]
    Degenerate {
        what: &'static str,
        index: usize,
        norm: f64,
    },

    /// A loss or gradient evaluated to NaN or infinity.
    #[error("non-finite {what} for sample {sample}")]
    NonFinite { what: &'static str, sample: usize },

    /// A cluster received (numerically) zero soft-assignment mass.
    #[error("empty cluster {cluster} (frequency {frequency:e})")]
    EmptyCluster { cluster: usize, frequency: f64 },

    #[error("training diverged at {stage} step {step}: {reason}")]
    Divergence {
        stage: &'static str,
        step: usize,
        reason: String,
    },

    #[error("sigma calibration failed: {0}")]
    Calibration(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
