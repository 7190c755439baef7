//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped
//! by the module that typically raises them; the payloads carry enough
//! context to diagnose a failure without re-running the computation.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by mesh construction, assembly, solvers, and drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition (wrong sign, empty
    /// range, out-of-bounds level, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A mesh failed a structural invariant (orientation, conformity,
    /// boundary classification).
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    /// Two meshes that were expected to be parent/child in one hierarchy
    /// are not.
    #[error("mesh hierarchy mismatch: {0}")]
    HierarchyMismatch(String),

    /// Operands of a linear-algebra operation have incompatible shapes.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A direct factorization hit a zero (or numerically vanishing) pivot.
    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    /// A vector or matrix contained NaN/Inf where finite data is required.
    #[error("non-finite data: {0}")]
    NonFinite(String),

    /// A sampled function returned a non-finite value at a mesh node.
    #[error("invalid function: non-finite sample at node {node} = ({x}, {y})")]
    InvalidFunction { node: usize, x: f64, y: f64 },

    /// The u-subproblem could not certify its error bound even after the
    /// inner tolerance was tightened the maximum number of times.
    #[error(
        "u-subproblem failed to certify ‖δ‖ ≤ {target:.3e}: reached ‖δ‖ = {achieved:.3e} \
         after {tightenings} tolerance tightenings (inner solver: {inner})"
    )]
    SubproblemFailure {
        /// Requested certificate bound ξ.
        target: f64,
        /// Best certified ‖δ‖₂.
        achieved: f64,
        /// Number of times the inner tolerance was tightened.
        tightenings: usize,
        /// Description of the inner solver's final state.
        inner: String,
    },

    /// An ADMM driver aborted mid-run (typically on a subproblem
    /// failure); the iterations completed so far are attached.
    #[error("driver aborted after {} logged iterations: {reason}", record.rows.len())]
    Aborted {
        /// The failure that stopped the run.
        reason: Box<Error>,
        /// Partial run record up to the failing iteration.
        record: Box<crate::admm::RunRecord>,
    },

    /// Configuration file or CLI option could not be parsed.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure (config files, emitted tables).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure for run records.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for [`Error::InvalidArgument`] from any displayable value.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
