use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("global token {index} out of range for sequence length {seq_len}")]
    GlobalOutOfRange { index: usize, seq_len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("query row {0} attends to no keys")]
    EmptyRow(usize),
    #[error("cannot merge an empty list of partial outputs")]
    EmptyMerge,
    #[error("invalid array configuration: {0}")]
    InvalidConfig(String),
    #[error("pass {pass} exceeds the {buffer} buffer: needs {needed} bytes, has {capacity}")]
    BufferOverflow {
        pass: usize,
        buffer: &'static str,
        needed: usize,
        capacity: usize,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, Error>;
