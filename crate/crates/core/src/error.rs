use crate::gridworld::ObjectId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A name (scenario, task, tracker, fusion variant) that is not registered.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("lookup error: unknown object id {0}")]
    UnknownObject(ObjectId),
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
