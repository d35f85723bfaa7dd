use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("provenance: {0}")]
    Provenance(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] ppm_data::DataError),
    #[error(transparent)]
    Model(#[from] ppm_models::ModelError),
    #[error(transparent)]
    Cache(#[from] ppm_cache::CacheError),
    #[error(transparent)]
    Metric(#[from] ppm_metrics::MetricError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

/// Tags any error with the pipeline stage it came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: std::fmt::Display> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| HarnessError::Stage { stage, message: e.to_string() })
    }
}
