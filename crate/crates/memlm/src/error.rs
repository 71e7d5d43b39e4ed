//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structural/configuration precondition failed (odd head dim, bad k, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A non-finite value was produced where one is not allowed.
    #[error("non-finite value in {context}{}", op_suffix(.op))]
    NonFinite {
        context: &'static str,
        op: Option<String>,
    },

    /// Tape misuse: double backward, non-scalar loss, foreign var.
    #[error("tape error: {0}")]
    Tape(String),

    /// Memory bank state error (stale read, version mismatch).
    #[error("memory state error: {0}")]
    MemoryState(String),

    /// Token id out of vocabulary range, or unknown token string.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Checkpoint file problems, each distinct so callers can match on them.
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),
    #[error("checkpoint shape mismatch for tensor `{name}`: file {file:?}, model {model:?}")]
    CheckpointShape {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

fn op_suffix(op: &Option<String>) -> String {
    match op {
        Some(o) => format!(" (first produced by {o})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
