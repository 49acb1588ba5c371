//! Command-line surface of the transfer-learning pipeline: run
//! configuration, checkpoint persistence, and the command implementations
//! behind the `detl` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::RunConfig;
pub use error::{CliError, Result};
