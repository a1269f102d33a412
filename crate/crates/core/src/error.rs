use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid restriction: {0}")]
    Restriction(String),
    #[error("degenerate softmax: {0}")]
    Degenerate(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("enumeration refused: {size} inputs exceed the limit of {limit}")]
    LimitExceeded { size: u128, limit: u128 },
    #[error("internal error: {0}")]
    Internal(String),
}
