use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: needs at least {need} rows, got {got}")]
    TooFewRows {
        op: &'static str,
        need: usize,
        got: usize,
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
