//! `sparse-accel` command-line driver.
//!
//! Exit status: 0 on success, 1 when `verify` is out of tolerance, 2 on a
//! configuration, input or validation error.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use sparse_accel::Error;

use crate::args::{Cli, Command};

/// Short machine-readable class of an error, printed before the message.
fn kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidWindow(_) | Error::InvalidPattern(_) | Error::GlobalOutOfRange { .. } => {
            "pattern"
        }
        Error::Shape(_) => "shape",
        Error::EmptyRow(_) | Error::EmptyMerge => "attention",
        Error::InvalidConfig(_) | Error::UnknownPreset(_) => "config",
        Error::BufferOverflow { .. } => "buffer",
        Error::Parse(_) => "parse",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a).map(|s| (s, true)),
        Command::Oracle(a) => commands::oracle(a).map(|s| (s, true)),
        Command::Schedule(a) => commands::schedule_cmd(a).map(|s| (s, true)),
        Command::Stats(a) => commands::stats(a).map(|s| (s, true)),
        Command::Verify(a) => commands::verify(a),
        Command::Compare(a) => commands::compare(a).map(|s| (s, true)),
    };
    match result {
        Ok((report, ok)) => {
            print!("{report}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", kind(&e));
            ExitCode::from(2)
        }
    }
}
