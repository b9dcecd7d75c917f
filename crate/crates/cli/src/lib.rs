//! Command-line plumbing around `marginlab`: one subcommand per library
//! operation plus a sweep runner that writes CSV (and optional SVG) results.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;
pub mod sweep;

pub use commands::{run, Cli};
pub use config::{ModeFlags, SweepConfig};
pub use error::{CliError, CliResult};
pub use sweep::{run_sweep, SweepOutcome, SweepRow, CSV_HEADER};
