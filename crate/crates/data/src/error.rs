use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("test split is empty")]
    EmptyTestSet,
    #[error("unknown item {0}")]
    UnknownItem(u32),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
