//! `oavcd` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime or provider failure, 2 usage or
//! validation error.

mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use args::{Cli, Command};

/// An error plus the exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult = Result<(), Failure>;

fn parse(argv: Vec<OsString>) -> Result<Cli, Failure> {
    let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| e.exit());
    let Some(path) = cli.config.clone() else {
        return Ok(cli);
    };
    let at = config::subcommand_index(&argv).expect("clap accepted a subcommand");
    let sub = argv[at].to_string_lossy().into_owned();
    let extra = config::config_flags(&path, &Cli::command(), &sub, &argv[at + 1..]).map_err(Failure::usage)?;
    let mut merged = argv[..=at].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[at + 1..]);
    Ok(Cli::try_parse_from(merged).unwrap_or_else(|e| e.exit()))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Auxview(a) => commands::auxview(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Fixture(a) => commands::fixture(a),
        Command::ServeMock(a) => commands::serve_mock(a),
    }
}

fn main() -> ExitCode {
    let result = parse(std::env::args_os().collect()).and_then(|cli| {
        let level = match cli.verbose {
            0 => "warn",
            1 => "info",
            _ => "debug",
        };
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
            .format_timestamp(None)
            .init();
        run(cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
