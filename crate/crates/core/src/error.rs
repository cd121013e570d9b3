use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("no monotonic alignment of {tokens} tokens onto {frames} frames")]
    InfeasibleAlignment { tokens: usize, frames: usize },
    #[error("brute-force search limited to {max_tokens} tokens and {max_frames} frames, got {tokens}x{frames}")]
    SizeGuard {
        tokens: usize,
        frames: usize,
        max_tokens: usize,
        max_frames: usize,
    },
    #[error("{what} index {index} out of range for size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
