use ppm_cache::CacheError;
use ppm_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no modal feature for item {0}")]
    MissingFeature(u32),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
    #[error("{stage}: loss is not finite at step {step} (last finite loss {last_finite:?})")]
    Diverged {
        stage: &'static str,
        step: usize,
        last_finite: Option<f64>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
