use std::path::PathBuf;

use thiserror::Error;
use vaebench_core::objectives::LossBreakdown;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] vaebench_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("non-finite loss at iteration {iter}; last finite breakdown: {}", describe(.last))]
    NonFinite { iter: u64, last: Option<LossBreakdown> },
    #[error("image error: {0}")]
    Image(String),
}

fn describe(b: &Option<LossBreakdown>) -> String {
    match b {
        None => "none (first iteration)".into(),
        Some(b) => format!(
            "total={} recon={} kl={} capacity={} penalty={}",
            b.total, b.recon, b.kl, b.capacity, b.penalty
        ),
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Attaches `path` to an IO error.
pub(crate) fn file_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::File { path, source }
}
