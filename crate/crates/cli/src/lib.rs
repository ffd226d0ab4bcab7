//! Command surface of the `genspan` binary: config resolution and one
//! function per subcommand, usable in-process.

pub mod commands;
pub mod config;

pub use commands::{cmd_bench, cmd_eval, cmd_export_relevance, cmd_prior, cmd_rank, cmd_synth, cmd_train};
pub use config::{Overrides, RunConfig};
