use crate::model::{BlockExtent, StepId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the transport.
///
/// The type is `Clone` so that a failed read handle can report the same
/// failure on every wait.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("extent invalid in dimension {dim}: {reason}")]
    ExtentInvalid { dim: usize, reason: String },

    #[error("dimension mismatch: expected {expected} dims, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("byte length overflows u64")]
    Overflow,

    #[error("index lies outside the block")]
    OutOfBlock,

    #[error("variable {name}: rank {rank} declares shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        rank: u32,
        expected: Vec<u64>,
        got: Vec<u64>,
    },

    #[error("unknown variable {0}")]
    UnknownVariable(String),

    #[error("selection not covered by any written block ({} missing extents)", .0.len())]
    UnfilledSelection(Vec<BlockExtent>),

    #[error("length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: u64, got: u64 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("cohort failed: {0}")]
    CohortFailed(String),

    #[error("no contact information appeared within {0} s")]
    OpenTimeout(u64),

    #[error("stream is closed")]
    StreamClosed,

    #[error("operation requires an open step")]
    NotInStep,

    #[error("invalid call order: {0}")]
    InvalidState(&'static str),

    #[error("pattern changed after lock: {0}")]
    PatternChangedAfterLock(String),

    #[error("connection lost: {0}")]
    ConnectionLost(String),

    #[error("step {0} is no longer registered")]
    StaleStep(StepId),

    #[error("read [{offset}, {offset}+{length}) exceeds block of {size} bytes")]
    OutOfRange { offset: u64, length: u64, size: u64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("regression input is degenerate: need at least two distinct sizes")]
    DegenerateInput,

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
