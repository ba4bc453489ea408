//! Run configuration, image output and the subcommand implementations
//! behind the `srdit` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod pgm;

pub use commands::CliError;
pub use config::{ConfigError, RunConfig, Task};
