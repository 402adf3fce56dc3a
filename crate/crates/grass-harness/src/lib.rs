//! Experiment harness around the core engine: configuration, datasets,
//! the training loop with offloaded optimizer execution, artifact
//! export, sweeps, and reporting.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod sweep;

pub use config::{DatasetSpec, Method, Precision, RunConfig};
pub use error::{HarnessError, Result};
pub use runner::{run, run_with, RunOutcome, RunOverrides};
