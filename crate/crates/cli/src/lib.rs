//! Declarative experiment runner for `flosslab`: TOML configs, seed-parallel
//! execution into checksummed result bundles, and SVG/markdown reports.

pub mod bundle;
pub mod config;
pub mod plot;
pub mod report;

use std::path::PathBuf;

pub use bundle::{run, verify, Manifest, RunOptions};
pub use config::ExperimentConfig;
pub use report::{report, ReportSummary};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "FLOSSLAB_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for validation failures, 2 for everything that failed at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
