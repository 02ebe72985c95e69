//! Command-line front end: argument parsing, `key=value` config files and
//! the subcommands.

pub mod args;
pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::Parser;
use fusionhead::{ErrorClass, Result};

use crate::args::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Usage => EXIT_USAGE,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numeric => EXIT_NUMERIC,
    }
}

/// Outcome of argument resolution.
pub enum Parsed {
    Run(Box<Cli>),
    /// Help or version text was requested; print it and exit 0.
    Info(String),
    Usage(String),
}

/// Parses the command line, then re-parses it with the config file's pairs
/// appended so that they win over the flags.
pub fn parse_args<I, T>(argv: I) -> Result<Parsed>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let first = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => return Ok(clap_outcome(e)),
    };
    let Some(path) = &first.global.config else {
        return Ok(Parsed::Run(Box::new(first)));
    };
    let mut extended = argv.clone();
    extended.extend(config::config_args(path)?.into_iter().map(OsString::from));
    Ok(match Cli::try_parse_from(&extended) {
        Ok(cli) => Parsed::Run(Box::new(cli)),
        Err(e) => clap_outcome(e),
    })
}

fn clap_outcome(e: clap::Error) -> Parsed {
    use clap::error::ErrorKind;
    let text = e.render().to_string();
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            Parsed::Info(text)
        }
        _ => Parsed::Usage(text),
    }
}

/// Runs a parsed command line, printing the resolved configuration first.
pub fn execute(cli: &Cli) -> Result<()> {
    let resolved = serde_json::to_string(cli).map_err(|e| fusionhead::Error::Json(e.to_string()))?;
    println!("config {resolved}");
    commands::run(cli)
}

/// Whole-program entry: returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse_args(argv) {
        Ok(Parsed::Run(cli)) => cli,
        Ok(Parsed::Info(text)) => {
            print!("{text}");
            return EXIT_OK;
        }
        Ok(Parsed::Usage(text)) => {
            eprint!("{text}");
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(e.class());
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.class())
        }
    }
}
