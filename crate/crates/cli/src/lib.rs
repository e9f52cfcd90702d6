//! Command-line pipeline and local pose-editing service.
//!
//! [`commands`] holds the subcommand logic, [`server`] the TCP service and
//! [`client`] a blocking client for it. The wire format is in [`protocol`].

pub mod client;
pub mod commands;
pub mod config;
pub mod error;
pub mod protocol;
pub mod server;

pub use error::{CliError, Result};
