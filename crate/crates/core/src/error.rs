use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("degenerate mask: every voxel is {0}")]
    DegenerateMask(u8),
    #[error("value outside its domain: {0}")]
    Domain(String),
    #[error("could not generate a sample with foreground fraction in range after {attempts} attempts (sample {index})")]
    GenerationRetryExceeded { index: usize, attempts: usize },
    #[error("cannot split: {0}")]
    Split(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("non-finite loss at step {step}: {detail}{}", dump.as_ref().map(|p| format!(" (batch dumped to {})", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        step: usize,
        detail: String,
        dump: Option<PathBuf>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
