//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and an expected contract) disagree on shape.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition on an operation's arguments failed.
    #[error("invalid argument in {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// Configuration file / key errors.
    #[error("config error: {0}")]
    Config(String),

    /// A forward pass produced a non-finite value.
    #[error("non-finite value in tensor '{name}' (node {node}, shape {shape:?})")]
    NonFinite {
        name: String,
        node: usize,
        shape: Vec<usize>,
    },

    /// Serialization / dataset format errors.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
