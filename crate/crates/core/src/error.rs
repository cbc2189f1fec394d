use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },

    #[error("packed length {0} is not a triangular number")]
    BadLength(usize),

    #[error("time {t} outside the interval [{start}, {end})")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },

    #[error("endpoint increment leaves the active leaf (relative residual {residual:e})")]
    EndpointOffLeaf { residual: f64 },

    #[error("cumulant knots incompatible: {0}")]
    KnotMismatch(String),

    #[error("data carries no variance")]
    DegenerateData,

    #[error("normal equations are singular")]
    SingularDesign,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("every candidate was excluded by the kernel")]
    AllExcluded,

    #[error("terminal surrogate is empty")]
    EmptySurrogate,

    #[error("state became non-finite at inner step {step}")]
    NonFiniteState { step: usize },

    #[error("series too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("normalising variance must be positive")]
    ZeroVariance,

    #[error("insufficient training data: {0}")]
    InsufficientData(String),

    #[error("feature statistics were not recorded at fit time")]
    MissingStats,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("path is degenerate for estimation: {0}")]
    DegeneratePath(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
