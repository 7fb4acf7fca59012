//! `root/runs.log`: one JSON object per line and per command run, holding
//! the time, the command, its fully resolved flags and its metrics.

use std::io::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{data_err, CliResult};

pub const RUN_LOG_FILE: &str = "runs.log";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub command: String,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
}

pub fn append(root: &Path, command: &str, config: serde_json::Value, metrics: serde_json::Value) -> CliResult<()> {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let entry = RunEntry {
        timestamp,
        command: command.to_string(),
        config,
        metrics,
    };
    let mut line = serde_json::to_string(&entry).expect("run entries serialize");
    line.push('\n');
    let path = root.join(RUN_LOG_FILE);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| data_err(&path, e))?;
    // one write on an O_APPEND descriptor, so concurrent runs never interleave
    file.write_all(line.as_bytes()).map_err(|e| data_err(&path, e))
}

pub fn read(root: &Path) -> CliResult<Vec<RunEntry>> {
    let path = root.join(RUN_LOG_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(data_err(&path, e)),
    };
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| data_err(&path, e)))
        .collect()
}
