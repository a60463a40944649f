use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty loss: every position is masked")]
    EmptyLoss,

    #[error("backward: {0}")]
    Backward(String),

    #[error("value {value} of component {component} is outside [-1, 1]")]
    Range { component: String, value: f32 },

    #[error("unknown action token {0}")]
    UnknownActionToken(u32),

    #[error("ambiguous action token {0}: several bins share it")]
    AmbiguousActionToken(u32),

    #[error("invalid action token {0}")]
    InvalidActionToken(u32),

    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("sequence too long: {len} positions exceed max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("decoding exceeded {0} tokens without a terminator")]
    DecodeCap(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("mixed labels within one batch")]
    MixedBatch,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("runs not comparable: {0}")]
    NotComparable(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
