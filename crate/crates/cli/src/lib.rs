//! Configuration and commands behind the `seqhtc` binary.

pub mod commands;
pub mod config;

pub use commands::exit_code;
pub use config::{Overrides, RunConfig};
