//! Error type shared across the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("config error: {0}")]
    ConfigGeneral(String),

    #[error("data generation failed: {0}")]
    DataGen(String),

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SimError::InvalidArgument(msg.into())
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        SimError::DimensionMismatch(msg.into())
    }

    pub fn empty(msg: impl Into<String>) -> Self {
        SimError::EmptyInput(msg.into())
    }
}
