//! `xfields` command line front end and HTTP render service.

pub mod commands;
pub mod server;

pub use commands::{run, Cli, CliError};
