use thiserror::Error;

/// Errors raised by tensor construction, operators and estimators.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents are incompatible with the operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A scalar or structural argument is out of its valid domain.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A linear system or model fit was singular or degenerate.
    #[error("estimation error: {0}")]
    Estimation(String),
    /// RANSAC found no model supported by enough inliers.
    #[error("no consensus: best model has {best} inliers, need at least {required}")]
    NoConsensus { best: usize, required: usize },
    /// Homogeneous coordinate with vanishing last component.
    #[error("degenerate point: homogeneous scale {0:e} is too close to zero")]
    DegeneratePoint(f64),
    /// A 3-D point is at or behind the camera plane.
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    /// The tape was misused (detached variables, mixed tapes).
    #[error("usage error: {0}")]
    Usage(String),
    /// Gradient descent produced a non-finite loss.
    #[error("optimization error: {0}")]
    Optimization(String),
    /// Malformed file content.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
