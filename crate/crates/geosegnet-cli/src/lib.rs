//! Library half of the `geosegnet` command-line tool.
//!
//! The binary in `main.rs` only parses arguments and maps errors to exit
//! codes; everything it does lives here so integration tests can drive
//! the same code paths in process.

pub mod commands;
pub mod config;
