//! Error type shared by all core operations.

use alloc::string::String;
use core::fmt;

/// Result alias used throughout the core crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors emitted by matrix, attention, diversity and training code.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A constructor received a buffer whose length does not match rows x cols.
    DataLength {
        rows: usize,
        cols: usize,
        got: usize,
    },
    /// A backward pass received traces that do not match the parameters
    /// they were supposedly produced from.
    TraceMismatch { expected: usize, got: usize },
    /// Attention probabilities were requested for a head that never
    /// materialized them (FAVOR fast path).
    AttentionUnavailable { head: usize },
    /// A configuration field failed validation.
    InvalidConfig { field: &'static str, reason: String },
    /// Training produced a non-finite loss at the given step.
    Diverged { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch between {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::DataLength { rows, cols, got } => write!(
                f,
                "matrix data length {got} does not match {rows}x{cols} = {}",
                rows * cols
            ),
            Error::TraceMismatch { expected, got } => write!(
                f,
                "trace/parameter mismatch: layer has {expected} heads but {got} traces were supplied"
            ),
            Error::AttentionUnavailable { head } => write!(
                f,
                "head {head} has no materialized attention matrix; rerun the forward pass with attention materialization enabled"
            ),
            Error::InvalidConfig { field, reason } => {
                write!(f, "invalid config field `{field}`: {reason}")
            }
            Error::Diverged { step } => {
                write!(f, "training diverged: non-finite loss at step {step}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
