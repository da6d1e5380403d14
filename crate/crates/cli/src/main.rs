//! `regenstab`: stability verdicts, period sweeps, Monte Carlo moments and
//! lift inspection for switched linear systems.
//!
//! Exit status: 0 stable (or success), 1 unstable, 2 marginal, 10 malformed
//! document, 11 invalid model or unmet assumption, 12 usage, 13 I/O,
//! 14 numerical failure.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;
use crate::commands::EXIT_USAGE;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
