//! `patchrot` command-line interface.
//!
//! Settings resolve in three layers, later ones winning: built-in defaults,
//! the JSON config file, then command-line flags. The fully resolved config
//! is echoed to `config.resolved` in the run directory, which is named
//! `<command>-<config hash>` under `output_dir`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 data error.

mod args;
mod commands;
mod rundir;

use std::process::ExitCode;

use clap::Parser;
use patchrot::Error;

use crate::args::Cli;

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::DataFormat { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
