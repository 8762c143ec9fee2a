use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value at parameter {param} entry {entry}")]
    NonFinite { param: usize, entry: usize },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
