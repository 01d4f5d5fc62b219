//! Library side of the `pidpbc` command-line tool: config parsing,
//! trajectory CSV I/O and the subcommands.

pub mod commands;
pub mod config;
pub mod csvio;

pub use commands::{cmd_equilibrium, cmd_simulate, cmd_sweep, cmd_verify, exit};
