use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChoreoError {
    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity surfaced during a forward or backward pass.
    #[error("numeric fault in op `{op}`")]
    NumericFault { op: String },

    /// The replay buffer does not yet hold enough data to sample from.
    #[error("not ready: {0}")]
    NotReady(String),

    #[error("parse error at record {record}, field `{field}`: {message}")]
    Parse {
        record: usize,
        field: String,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ChoreoError>;

impl ChoreoError {
    pub fn contract(msg: impl Into<String>) -> Self {
        ChoreoError::Contract(msg.into())
    }
}
