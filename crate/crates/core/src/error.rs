use thiserror::Error;

/// Errors produced by every layer of the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A CSV row could not be parsed (ragged row, bad structure).
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// A single cell could not be parsed as a number.
    #[error("parse error at row {row}, column {col} ({name}): {message}")]
    ParseCell {
        row: usize,
        col: usize,
        name: String,
        message: String,
    },

    /// Header or manifest inconsistency.
    #[error("schema error: {0}")]
    Schema(String),

    /// Dimension mismatch between values that must agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Inference produced a non-finite or otherwise unusable value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An operation filtered away everything it was given.
    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
