use std::path::PathBuf;

use thiserror::Error;

/// Broad classification used by the command-line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or an invalid configuration.
    Usage,
    /// Unreadable, malformed or inconsistent data and model files.
    Data,
    /// Numerical failure or a violated modelling assumption.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix of {rows}x{cols} exceeds the brute-force limit of {limit}x{limit}")]
    TooLarge { rows: usize, cols: usize, limit: usize },

    #[error("non-finite value produced: {0}")]
    NonFinite(String),

    #[error("loss `{0}` is not differentiable")]
    NotDifferentiable(&'static str),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("contraction condition violated: smoothness constant {kappa} must be below lambda {lambda}")]
    Contraction { kappa: f64, lambda: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("no eligible samples: the transferability rate has an empty denominator")]
    EmptyDenominator,

    #[error("datasets share samples: {0}")]
    LineageOverlap(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("label {label} out of range for {classes} classes at line {line}")]
    LabelRange { label: usize, classes: usize, line: usize },

    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model file is truncated: {0}")]
    Truncated(String),

    #[error("model file checksum mismatch")]
    Checksum,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dimension(_) | Error::InvalidArgument(_) | Error::TooLarge { .. } => {
                ErrorKind::Usage
            }
            Error::NonFinite(_)
            | Error::NotDifferentiable(_)
            | Error::Assumption(_)
            | Error::Contraction { .. }
            | Error::Diverged { .. }
            | Error::EmptyDenominator => ErrorKind::Numerical,
            Error::LineageOverlap(_)
            | Error::EmptyDataset(_)
            | Error::Parse { .. }
            | Error::LabelRange { .. }
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Checksum
            | Error::Format(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::Stage { source, .. } => source.kind(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
