//! Command-line pipeline tying the library together into reproducible runs:
//! synthetic data generation, training, hyper-heuristic optimization,
//! evaluation with fairness reporting, and per-sample explanations.
//!
//! Every command is deterministic for fixed inputs and seed. On failure a
//! machine-readable error record is printed to stderr, the exit code is
//! nonzero, and files written so far by the failing command are removed.

mod args;
mod checkpoint;
mod commands;
mod report;
mod run_config;

pub use args::{Cli, Command};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use run_config::RunConfig;

use clap::Parser;
use std::ffi::OsString;

/// Parses arguments and runs one command; returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version go to stdout with success; usage errors keep
            // clap's diagnostics.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            let record = serde_json::json!({
                "error": {
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{record}");
            1
        }
    }
}
