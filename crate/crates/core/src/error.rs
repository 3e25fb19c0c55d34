use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("origin is not contained in the innovation window")]
    OriginNotInWindow,

    #[error("window of {points} points exceeds the memory budget of {budget} points")]
    WindowTooLarge { points: usize, budget: usize },

    #[error("wrong field kind: {0}")]
    WrongSpecKind(String),

    #[error("p-norm unavailable: {0}")]
    PNormUnavailable(String),

    #[error("tail sum cannot be certified: {0}")]
    UncertifiableTail(String),

    #[error("kernel is not Lipschitz: {0}")]
    NotLipschitz(String),

    #[error("bandwidth violates assumption A3: {0}")]
    BandwidthViolation(String),

    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),

    #[error("evaluation grid does not resolve the kernel: step {step} > bandwidth/10 = {limit}")]
    UnresolvedGrid { step: f64, limit: f64 },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("assumption check failed: {0}")]
    AssumptionFailed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
