use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite: pivot {pivot} is {value:.3e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("triangular factor is singular at diagonal index {index}")]
    Singular { index: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("backprop requested for node {node} but the tape holds {len} nodes")]
    MissingTape { node: usize, len: usize },

    #[error("style bank has no statistics for domain {domain}")]
    BankNotReady { domain: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure at epoch {epoch}, batch {batch}: {source}")]
    Numeric {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what} file: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("spec parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput(_) => "empty_input",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NotSymmetric { .. } => "not_symmetric",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::Singular { .. } => "singular",
            Error::NonFinite(_) => "non_finite",
            Error::MissingTape { .. } => "missing_tape",
            Error::BankNotReady { .. } => "bank_not_ready",
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Format { .. } => "format",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
