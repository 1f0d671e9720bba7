//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("reward error: {0}")]
    Reward(String),

    #[error("stale rollouts: generated under params version {rollout}, current is {current}")]
    Stale { rollout: u64, current: u64 },

    #[error("adapters disabled: lora_rank is 0")]
    AdaptersDisabled,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
