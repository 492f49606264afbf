//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between an input and what the operation expects.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An operation that requires data received an empty batch or env list.
    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    /// A loss or gradient evaluated to NaN/inf. Carries the parameter norm
    /// at the offending point so divergence is diagnosable from logs.
    #[error("non-finite loss (parameter l2 norm {param_norm})")]
    NonFiniteLoss { param_norm: f64 },

    /// A spec or config value violates a documented invariant.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// All weighted losses are zero; the balancing step has no direction.
    #[error("degenerate loss normalization: {0}")]
    DegenerateLosses(String),

    /// The LP has no feasible point.
    #[error("infeasible linear program")]
    InfeasibleLp,

    /// The LP is unbounded (should not happen on simplex-constrained programs).
    #[error("unbounded linear program")]
    UnboundedLp,

    /// Gradient matrix contained NaN entries.
    #[error("non-finite gradient entries in {0}")]
    NonFiniteGradient(&'static str),

    /// The operation is only defined for the other loss kind.
    #[error("unsupported loss kind for {0}")]
    UnsupportedLossKind(&'static str),

    /// Cosine of a zero vector is undefined.
    #[error("cosine similarity undefined for zero vector")]
    ZeroVector,

    /// IDX container parse failure; offset is the byte position of the issue.
    #[error("idx parse error at byte {offset}: {reason}")]
    IdxParse { offset: usize, reason: String },

    /// A run history is missing fields the consumer requires.
    #[error("invalid run history: {0}")]
    InvalidHistory(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
