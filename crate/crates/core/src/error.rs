use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("voxel {0} has zero sample variance")]
    ZeroVarianceVoxel(usize),
    #[error("correlation {value} at pair ({row}, {col}) is outside (-1, 1)")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrices are in different spaces")]
    MixedSpace,
    #[error("expected a matrix in {expected} space, found {found}")]
    WrongSpace {
        expected: &'static str,
        found: &'static str,
    },
    #[error("shrinkage weight {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("subject {0} has no matching replicate")]
    UnpairedSubject(String),
    #[error("subject {0} is missing a replicate")]
    MissingReplicate(String),
    #[error("need at least {needed} subjects, found {found}")]
    TooFewSubjects { needed: usize, found: usize },
    #[error("every subject has zero test-retest difference")]
    AllZeroDifferences,
    #[error("scan-length adjustment factor {0} is not positive")]
    NonpositiveTheta(f64),
    #[error("insufficient scan length: {0}")]
    InsufficientLength(String),
    #[error("affinity matrix is degenerate: {0}")]
    DegenerateAffinity(String),
    #[error("eigensolver failed: {0}")]
    EigensolverFailure(String),
    #[error("voxel subset is empty")]
    EmptySubset,
    #[error("input is empty")]
    EmptyInput,
    #[error("subject correlation draw rejected {0} times")]
    ResampleLimitExceeded(usize),
    #[error("covariance matrix is not positive definite")]
    FactorizationFailure,
    #[error("sessions of subject {subject} have unequal lengths ({first} vs {second})")]
    UnequalSessionLengths {
        subject: String,
        first: usize,
        second: usize,
    },
    #[error("layout part has {0} timepoints, fewer than the minimum of 10")]
    TooShort(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
