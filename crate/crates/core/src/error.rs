use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TdnError>;

#[derive(Debug, Error)]
pub enum TdnError {
    #[error("shape error in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// An internal invariant was broken; usually an upstream bug.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Caller-supplied value outside its documented range.
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TdnError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        TdnError::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    pub(crate) fn validation(message: impl Into<String>) -> Self {
        TdnError::Validation(message.into())
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        TdnError::Contract(message.into())
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        TdnError::Format {
            offset,
            message: message.into(),
        }
    }
}
