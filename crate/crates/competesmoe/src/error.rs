//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("softmax: row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("config: {path}: {message}")]
    Config { path: String, message: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("mixture fit failed: {0}")]
    Fit(String),

    #[error("quadrature grid too narrow: captured mass {mass} (deficit above 1e-4)")]
    QuadratureDeficit { mass: f64 },

    #[error("mixing measures have different atom counts: {lhs} vs {rhs}")]
    AtomCountMismatch { lhs: usize, rhs: usize },

    #[error("rate experiment: {0}")]
    RateExperiment(String),

    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 3 for config problems, 4 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 3,
            _ => 4,
        }
    }
}
