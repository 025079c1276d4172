use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: &'static str,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub details: serde_json::Value,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl Manifest {
    pub fn start(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            config_path: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix: now(),
            finished_unix: 0.0,
            details: serde_json::Value::Null,
        }
    }

    pub fn write(mut self, path: &Path) -> mlrm::Result<()> {
        self.finished_unix = now();
        std::fs::write(path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> mlrm::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
