//! `--config` files: a TOML table per subcommand whose keys are flag names
//! (`reassignment-ratio` or `reassignment_ratio`).

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::Command;
use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<ConfigFile> {
        let table: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("config file: {e}")))?;
        for (key, value) in &table {
            if !value.is_table() {
                return Err(CliError::Usage(format!("config file: `{key}` must be a [subcommand] table")));
            }
        }
        Ok(ConfigFile { table })
    }

    pub fn load(path: &Path) -> CliResult<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn section(&self, subcommand: &str) -> Option<&toml::Table> {
        self.table.get(subcommand).and_then(|v| v.as_table())
    }
}

/// Overlays `section` onto the parsed command, skipping every key that was
/// given explicitly on the command line.
pub fn merge(command: Command, matches: &ArgMatches, section: Option<&toml::Table>) -> CliResult<Command> {
    let Some(section) = section else {
        return Ok(command);
    };
    Ok(match command {
        Command::Ingest(a) => Command::Ingest(overlay(a, matches, section)?),
        Command::Sample(a) => Command::Sample(overlay(a, matches, section)?),
        Command::AugmentPreview(a) => Command::AugmentPreview(overlay(a, matches, section)?),
        Command::Train(a) => Command::Train(overlay(a, matches, section)?),
        Command::Predict(a) => Command::Predict(overlay(a, matches, section)?),
        Command::Evaluate(a) => Command::Evaluate(overlay(a, matches, section)?),
        Command::Outliers(a) => Command::Outliers(overlay(a, matches, section)?),
        Command::Serve(a) => Command::Serve(overlay(a, matches, section)?),
    })
}

fn overlay<T: Serialize + DeserializeOwned>(args: T, matches: &ArgMatches, section: &toml::Table) -> CliResult<T> {
    let mut value = serde_json::to_value(args).expect("argument structs serialize");
    let fields = value.as_object_mut().expect("argument structs are objects");
    for (key, v) in section {
        let id = key.replace('-', "_");
        if !fields.contains_key(&id) {
            return Err(CliError::Usage(format!("config file: unknown key `{key}`")));
        }
        if matches.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        let v = serde_json::to_value(v).map_err(|e| CliError::Usage(format!("config file: `{key}`: {e}")))?;
        fields.insert(id, v);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config file: {e}")))
}
