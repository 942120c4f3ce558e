//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HmtError>;

#[derive(Debug, Error)]
pub enum HmtError {
    /// Incompatible tensor shapes, reported with both offenders.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// NaN/Inf where a finite value is required.
    #[error("numeric domain error in {op}: {message}")]
    NumericDomain { op: &'static str, message: String },

    /// Out-of-range token id or target, with the offending position.
    #[error("index {index} out of range (bound {bound}) at position {position}")]
    IndexOutOfRange {
        index: usize,
        bound: usize,
        position: usize,
    },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Sequence longer than the backbone's position table.
    #[error("sequence length {got} exceeds max_pos {max}")]
    Capacity { got: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Malformed checkpoint or token file, with the byte offset.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Non-finite gradient detected in assert mode.
    #[error("stability error: {0}")]
    Stability(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
