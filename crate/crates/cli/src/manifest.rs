use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

/// Record of one invocation, enough to repeat it.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_owned(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config,
            seed,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Writes to `path`, or to standard error when there is no output location.
    pub fn finish(mut self, path: Option<&Path>) -> Result<(), CliError> {
        self.finished_unix_ms = now_ms();
        let text =
            serde_json::to_string_pretty(&self).map_err(|e| CliError::Internal(e.to_string()))?;
        match path {
            Some(p) => std::fs::write(p, text + "\n")
                .map_err(|e| CliError::Internal(format!("{}: {e}", p.display()))),
            None => {
                eprintln!("{text}");
                Ok(())
            }
        }
    }
}

/// `<file>.manifest.json` next to a file output.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
