//! Experiment runner for the `z2-core` verification suites.
//!
//! Each subcommand reads an [`ExperimentConfig`], runs, and reports an
//! [`Outcome`]: failed assertions plus CSV rows and a JSON summary.

// negated comparisons reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

pub use commands::{run_command, Command, Outcome};
pub use config::ExperimentConfig;

pub const THREADS_ENV: &str = "Z2_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    /// A numerical contract broke mid-run.
    #[error("{0}")]
    Violation(String),
    #[error(transparent)]
    Core(z2_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<z2_core::Error> for CliError {
    fn from(e: z2_core::Error) -> Self {
        match e {
            z2_core::Error::DualityViolation { .. } | z2_core::Error::CollapseMismatch { .. } => {
                CliError::Violation(e.to_string())
            }
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Violation(_) => 1,
            CliError::Config(_) => 2,
            CliError::Core(_) | CliError::Io(_) => 3,
        }
    }
}

/// Worker count from `Z2_THREADS`, falling back to the machine's parallelism.
pub fn thread_count(env: Option<&str>) -> Result<usize, CliError> {
    match env {
        None | Some("") => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}
