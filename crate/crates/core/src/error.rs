use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    Usage,
    Parse,
    InsufficientData,
    Solver,
    Invariant,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("line {line}: expected {expected} losses (seq_len), found {found}")]
    LengthMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: duplicate tokens_trained {tokens}")]
    DuplicateTokens { line: usize, tokens: u64 },

    #[error("line {line}: non-finite or negative loss at position {position}")]
    NonFiniteLoss { line: usize, position: usize },

    #[error("insufficient data for {what}: need at least {needed}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("zero total variance in observations; R² is undefined")]
    DegenerateVariance,

    #[error("length mismatch: {left} vs {right}")]
    ShapeMismatch { left: usize, right: usize },

    #[error("model produced a non-finite value at params {params:?}")]
    NonFiniteModel { params: Vec<f64> },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("{what}: argument outside the model domain at N = {tokens}")]
    Domain { what: &'static str, tokens: f64 },

    #[error("checkpoint with tokens_trained = {0} is not in the trajectory")]
    MissingCheckpoint(u64),

    #[error("cosine segment queried at N = {0} but it was never fitted")]
    CosineUnset(u64),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. }
            | Error::Manifest(_)
            | Error::MalformedRecord { .. }
            | Error::LengthMismatch { .. }
            | Error::DuplicateTokens { .. }
            | Error::NonFiniteLoss { .. } => ErrorClass::Parse,
            Error::InsufficientData { .. }
            | Error::DegenerateVariance
            | Error::MissingCheckpoint(_) => ErrorClass::InsufficientData,
            Error::NonFiniteModel { .. } | Error::Solver(_) | Error::Domain { .. } => {
                ErrorClass::Solver
            }
            Error::InvalidSpec(_) | Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::ShapeMismatch { .. } | Error::CosineUnset(_) | Error::Invariant(_) => {
                ErrorClass::Invariant
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
