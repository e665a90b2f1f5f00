use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty block")]
    EmptyBlock,

    #[error("empty block: nothing to recover from")]
    NothingToRecover,

    #[error("more samples than block length ({samples} > {block_len})")]
    TooManySamples { samples: usize, block_len: usize },

    #[error("not unitary (max deviation from identity {deviation:.3e})")]
    NotUnitary { deviation: f64 },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("MAPE index range empty")]
    MapeRangeEmpty,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("block {ordinal}: {source}")]
    Block {
        ordinal: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("N={block_len}, ratio={ratio}: {source}")]
    SweepCell {
        block_len: usize,
        ratio: f64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
