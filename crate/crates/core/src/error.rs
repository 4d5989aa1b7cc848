use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("non-finite gradient entry {index} for parameter {slot}")]
    NonFiniteGradient { slot: usize, index: usize },

    #[error("non-finite value produced at layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer}: fan-in {fan_in} differs from fan-out {fan_out} and no adapter is configured")]
    MissingAdapter {
        layer: usize,
        fan_in: usize,
        fan_out: usize,
    },

    #[error("zero-pad adapter cannot shrink {fan_in} inputs to {fan_out} outputs")]
    PaddingCannotShrink { fan_in: usize, fan_out: usize },

    #[error("noise realization covers {expected} units but {actual} were supplied")]
    StaleRealization { expected: usize, actual: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn shapes(
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        Error::ShapeMismatch {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
