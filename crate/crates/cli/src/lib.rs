//! The `sarcasm` command-line tool.
//!
//! [`dispatch`] parses arguments, runs one subcommand and returns the process
//! exit code: 0 on success, 2 for usage or configuration errors, 3 for data
//! errors, 4 when a gradient check fails and 1 for anything else.

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;
use sarcasm_core::CoreError;

mod commands;
pub mod config;

pub use commands::Cli;
pub use config::{Override, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Verification(_) => EXIT_VERIFICATION,
            CliError::Core(CoreError::Config(_)) => EXIT_USAGE,
            CliError::Core(CoreError::GradCheck(_)) => EXIT_VERIFICATION,
            CliError::Core(e) if e.is_data_error() => EXIT_DATA,
            CliError::Core(_) => EXIT_FAILURE,
        }
    }
}

/// Runs the command line in `argv` (program name first), writing results to
/// `out` and diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let mut args = Vec::new();
    for a in argv {
        match a.into().into_string() {
            Ok(s) => args.push(s),
            Err(raw) => {
                let _ = writeln!(err, "error: argument {raw:?} is not valid UTF-8");
                return EXIT_USAGE;
            }
        }
    }
    let (overrides, rest) = match config::extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(err, "error: {e}\n\n{}", commands::usage());
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match commands::execute(cli, &overrides, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = e.exit_code();
            if code == EXIT_USAGE {
                let _ = writeln!(err, "error: {e}\n\n{}", commands::usage());
            } else {
                let _ = writeln!(err, "error: {e}");
            }
            code
        }
    }
}

/// [`run`] against the process's standard streams.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let code = run(argv, &mut stdout.lock(), &mut stderr.lock());
    let _ = std::io::stdout().flush();
    code
}
