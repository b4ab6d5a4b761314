use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("line {line}: event indicator must be 0 or 1, got `{value}`")]
    NonBinaryDelta { line: usize, value: String },

    #[error("line {line}: follow-up time must be positive, got {value}")]
    NonPositiveTime { line: usize, value: f64 },

    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: cannot parse `{value}` as a number")]
    BadNumber { line: usize, value: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("all inverse-probability weights are zero")]
    DegenerateWeights,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("BIC normalizer is zero")]
    ZeroNormalizer,

    #[error("cannot split {n} observations into {k} groups")]
    InvalidK { n: usize, k: usize },

    #[error("active set is empty")]
    EmptyActiveSet,

    #[error("active set covers every coordinate")]
    FullActiveSet,

    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("group {group}: {source}")]
    Group {
        group: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by front ends to choose an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::MissingColumn(_)
            | Error::NonBinaryDelta { .. }
            | Error::NonPositiveTime { .. }
            | Error::RaggedRow { .. }
            | Error::BadNumber { .. }
            | Error::InvalidData(_) => ErrorKind::Input,
            Error::InvalidConfig(_) | Error::InvalidK { .. } => ErrorKind::Config,
            Error::Group { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Numerical,
    Config,
}
