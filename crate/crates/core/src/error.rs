use thiserror::Error;

/// Errors raised anywhere in the lifting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("point is behind camera {view} (depth {depth:.3e}){context}")]
    BehindCamera {
        view: usize,
        depth: f64,
        context: String,
    },
    #[error("need at least 2 views, got {0}")]
    InsufficientViews(usize),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error on line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("optimization diverged at iteration {iteration} (loss {loss:.3e})")]
    OptimizationDiverged {
        iteration: usize,
        loss: f64,
        trace: Vec<f64>,
    },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn degenerate(msg: impl Into<String>) -> Error {
    Error::DegenerateGeometry(msg.into())
}
