//! Error type shared across the toolkit.

use thiserror::Error;

/// Unified error for every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum GsgwError {
    /// An argument violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A guard against super-linear blowup was exceeded (brute force
    /// enumeration, dense quadruple sums and similar).
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    /// Input is degenerate for the requested operation (coincident points,
    /// zero spread, duplicate interpolation nodes).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A computation produced NaN/Inf or violated a numeric sanity bound.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// The operation requires uniform weights but got something else.
    #[error("unsupported marginals: {0}")]
    UnsupportedMarginals(String),

    /// Iterative optimization failed on every attempt.
    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    /// A file could not be parsed; `location` is a line or byte position.
    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: String,
        location: String,
        message: String,
    },

    /// The neighbor graph is disconnected; geodesics are undefined.
    #[error("neighbor graph is disconnected: component sizes {0:?}")]
    Disconnected(Vec<usize>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GsgwError>;

impl GsgwError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GsgwError::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        GsgwError::ShapeMismatch(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        GsgwError::NumericFailure(msg.into())
    }
}
