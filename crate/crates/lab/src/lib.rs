//! File formats, configuration loading and command implementations around
//! `dispo-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod suite;

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use dispo_core::trainer::Executor;

/// Failure classes that map to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// Invalid configuration or arguments (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Anything that goes wrong while running (exit 1).
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<dispo_core::Error> for LabError {
    fn from(e: dispo_core::Error) -> Self {
        match e {
            dispo_core::Error::Config(m) => LabError::Config(m),
            other => LabError::Runtime(other.into()),
        }
    }
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Runtime(_) => 1,
        }
    }
}

/// Work-stealing executor on a dedicated pool. Output order always follows
/// the input index, so results do not depend on the thread count.
pub struct RayonExecutor {
    pool: ThreadPool,
}

impl RayonExecutor {
    /// `workers == 0` uses all available cores.
    pub fn new(workers: usize) -> anyhow::Result<Self> {
        Ok(Self { pool: ThreadPoolBuilder::new().num_threads(workers).build()? })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for RayonExecutor {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
