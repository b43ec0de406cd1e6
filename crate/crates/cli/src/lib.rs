//! Command-line layer over `cvqd-core`: configuration files, checkpoints,
//! output files and the verification suites.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error,
//! 3 physics or cutoff precondition, 4 I/O or format error.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod verify;

pub use checkpoint::{Checkpoint, TrainingSummary};
pub use commands::{run, Cli};
pub use config::{Profile, Role, RunConfig, TargetSpec};
pub use error::{CliError, CliResult};
