use thiserror::Error;

/// Errors produced by feature ingestion, model fitting, and scoring.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file: bad magic, truncated header, unparsable cell.
    #[error("format error: {0}")]
    Format(String),

    /// NaN or infinite entry where finite values are required.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// An operation that needs class labels was given an unlabeled set.
    #[error("labels required: {0}")]
    LabelsRequired(String),

    /// Too few samples for the requested estimate.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// Centered Gram matrix has no usable eigenvalues.
    #[error("degenerate gram matrix: {0}")]
    DegenerateGram(String),

    /// Numerical failure: singular covariance, EM failure on all restarts, ...
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown score column: {0}")]
    UnknownColumn(String),

    /// Model container lacks a section needed for the requested score.
    #[error("missing model section: {0}")]
    MissingSection(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Coarse classification used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::UnknownColumn(_) => ErrorClass::Usage,
            Error::Numerical(_) | Error::DegenerateGram(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

/// Error families mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;
