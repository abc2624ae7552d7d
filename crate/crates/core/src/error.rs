use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] cnav_autodiff::AutodiffError),
    #[error(transparent)]
    Sim(#[from] cnav_sim::SimError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{what}: {path}: {source}")]
    File {
        what: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Metrics(String),
    #[error("non-finite {what} at step {step}; offending batch written to {dump}")]
    NonFinite {
        what: String,
        step: usize,
        dump: PathBuf,
    },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
