//! Driver for the rfprint pipeline: configuration, the six stages and the
//! cached `pipeline` runner behind the `rfprint` binary.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

pub use config::{Arch, PipelineConfig, Provenance};
pub use error::CliError;
pub use pipeline::{run_pipeline, Layout, Outcome, Stage, ALL_STAGES};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "RFP_WORKERS";

/// Sizes the global thread pool from `RFP_WORKERS` if set.
pub fn init_workers() -> Result<(), CliError> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))
}
