//! Training, evaluation and reporting harness around `vaebench-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod report;
pub mod schedule;
pub mod trainer;
pub mod traversal;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
