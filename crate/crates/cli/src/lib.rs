//! Command-line pipeline and annotation service for keypose datasets.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches};

pub mod args;
pub mod commands;
pub mod config;
pub mod runlog;
pub mod service;

pub use args::{Cli, Command};

/// Exit code for malformed invocations and config files.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for failures caused by the data being processed.
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] keypose_core::Error),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(_) | CliError::Data(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let mut cmd = Cli::command();
    if argv.len() <= 1 {
        eprintln!("{}", cmd.render_usage());
        eprintln!("run `keypose --help` for the list of subcommands");
        return EXIT_USAGE;
    }
    let matches = match cmd.try_get_matches_from_mut(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = Cli::from_arg_matches(&matches)
        .map_err(|e| CliError::Usage(e.to_string()))
        .and_then(|cli| dispatch(cli, &matches));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, matches: &clap::ArgMatches) -> CliResult<()> {
    let file = cli.config.as_deref().map(config::ConfigFile::load).transpose()?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let section = file.as_ref().and_then(|f| f.section(name));
    let command = config::merge(cli.command, sub, section)?;
    let resolved = command.resolved_config();
    let outcome = commands::execute(&command)?;
    if let Some(root) = outcome.root {
        runlog::append(&root, name, resolved, outcome.metrics)?;
    }
    Ok(())
}

pub(crate) fn data_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn default_in(root: &std::path::Path, given: &Option<PathBuf>, file: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| root.join(file))
}
