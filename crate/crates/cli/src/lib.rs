//! Configuration, artifact handling and the experiment flow behind the `popi`
//! binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run_bound, run_pipeline, PipelineOutput, Stage, Workspace};
pub use config::{ConfigHash, ExperimentConfig};
pub use error::{CliError, Result};
