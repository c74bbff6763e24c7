//! `fedstress` command-line front end: configuration, job orchestration and reports.

pub mod compare;
pub mod config;
pub mod report;
pub mod runner;

use std::path::Path;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use runner::{run, RunManifest};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "FEDSTRESS_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(fedstress_core::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<fedstress_core::Error> for CliError {
    fn from(e: fedstress_core::Error) -> Self {
        match e {
            fedstress_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn thread_count() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_ENV} = {v:?} must be an integer >= 1"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
