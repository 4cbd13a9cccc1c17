use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("training: {0}")]
    Training(String),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("index: {0}")]
    Index(String),
}

pub type Result<T> = std::result::Result<T, Error>;
