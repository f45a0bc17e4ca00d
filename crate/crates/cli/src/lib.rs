//! Command-line front end: CSV ingestion, pipeline configuration and
//! artifact output.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Weights { data, balance } => commands::weights(&data, &balance),
        Command::Tune { data, balance } => commands::tune(&data, &balance),
        Command::Screen { data, balance } => commands::screen(&data, &balance),
        Command::Fit { data, balance, fit } => commands::fit(&data, &balance, &fit),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Report { input, out_dir } => commands::report(&input, out_dir.as_deref()),
    }
}

/// Parses `argv` and runs the command; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
