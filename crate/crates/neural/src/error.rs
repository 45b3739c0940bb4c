use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("variable belongs to another tape or a cleared one")]
    StaleVar,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Core(#[from] npo_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;
