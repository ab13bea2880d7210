use thiserror::Error;

/// Errors raised by the conformal toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An input lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-supplied score, model or law callback failed.
    #[error("score evaluation failed: {0}")]
    Score(String),

    /// The request is well-formed but refused because it is too expensive.
    #[error("refused: {0}")]
    Refused(String),

    /// An experiment configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical routine failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn check_alpha(alpha: f64) -> Result<f64> {
    if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}
