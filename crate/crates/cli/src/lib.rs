//! Command-line front end: run configuration, checkpoints and the
//! `gen-data`, `train`, `eval` and `viz-offsets` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
mod viz;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use commands::{main_with_args, run, Cli};
pub use config::{DataConfig, Precision, RunConfig};
pub use error::CliError;
