//! Error type shared across the crate.

/// Crate-wide error type.
///
/// `Unstable` is deliberately its own variant: the H2 norm of an unstable
/// closed loop is infinite, and the optimizer's line search catches this
/// variant to treat the candidate step as having infinite cost instead of
/// aborting the run.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A document violated the file schema; `path` points at the offending field.
    #[error("{path}: {message}")]
    Schema { path: String, message: String },

    /// The bus graph does not connect every bus.
    #[error("network graph is disconnected")]
    DisconnectedGraph,

    /// A matrix block that must be inverted is singular.
    #[error("singular {0}")]
    Singular(String),

    /// Spectral abscissa of the closed loop is not strictly negative
    /// (margin 1e-8); the H2 norm does not exist.
    #[error("unstable system: H2 norm infinite (spectral abscissa {abscissa:.3e})")]
    Unstable { abscissa: f64 },

    /// A simulated trajectory exceeded the divergence bound.
    #[error("instability detected: trajectory diverged at t = {t:.3} s")]
    Divergent { t: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("infeasible constraint set: {0}")]
    InfeasibleConstraints(String),

    /// Invariant violation on a domain value.
    #[error("{0}")]
    Invalid(String),

    /// No stabilizing feasible initial allocation could be found.
    #[error("no stable feasible initial allocation found")]
    NoStableInit,

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for the instability signal the optimizer's line search absorbs.
    pub fn is_unstable(&self) -> bool {
        matches!(self, Error::Unstable { .. })
    }

    /// True for any instability finding, including simulated divergence.
    pub fn is_instability_finding(&self) -> bool {
        matches!(self, Error::Unstable { .. } | Error::Divergent { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
