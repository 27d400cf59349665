//! Command-line pipeline: extract → analyze → fit → score/gradcheck → train → report.
//!
//! Exit codes: 0 success, 2 bad input or format, 3 empty result, 4 size
//! constraint (fewer filters than clusters), 5 internal invariant violation.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod protocol;
pub mod report;

pub use commands::{run, Cli, Command};
pub use error::{CliError, CliResult};
