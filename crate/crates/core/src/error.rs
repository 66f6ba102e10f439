use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Arguments that do not belong together (phase space or grid mismatch,
    /// unsupported method).
    #[error("usage error: {0}")]
    Usage(String),

    /// A map, system or measure violates one of its construction invariants.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {what} (residual {residual:e})")]
    NumericalFailure { what: String, residual: f64 },

    /// A search would exceed its combinatorial budget before starting.
    #[error("budget exceeded: {0}")]
    Budget(String),

    /// A search ran to its budget without finding what it was looking for.
    /// This is inconclusive, not a disproof.
    #[error("search exhausted: {what} (coverage {coverage:.4})")]
    Exhausted { what: String, coverage: f64 },

    #[error("empty support: {0}")]
    EmptySupport(String),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
