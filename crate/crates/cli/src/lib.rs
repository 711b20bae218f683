//! Batch interface to the `psar` library: configuration, delimited-text data
//! files, run archives and the `simulate`, `fit`, `forecast` and `diagnose`
//! commands.

pub mod archive;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod simulate;

pub use error::{CliError, CliResult};
