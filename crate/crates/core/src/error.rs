use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed scene file: {0}")]
    SceneFile(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
