use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gradleak_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
