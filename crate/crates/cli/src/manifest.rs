use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::failure::{CmdResult, Failure};
use crate::io::{sha256_file, write_json_atomic};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub arguments: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            arguments: std::env::args().skip(1).collect(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        }
    }

    /// Record an input with its digest as of now. Unreadable inputs are
    /// skipped; the command reports them separately.
    pub fn add_input(&mut self, path: &Path) {
        match sha256_file(path) {
            Ok(sha256) => self.inputs.push(InputDigest {
                path: path.to_path_buf(),
                sha256,
            }),
            Err(e) => log::warn!("not hashing {}: {e}", path.display()),
        }
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&self, dir: &Path) -> CmdResult {
        let value = serde_json::to_value(self)
            .map_err(|e| Failure::Usage(format!("manifest: {e}")))?;
        write_json_atomic(&dir.join("manifest.json"), &value)
    }
}
