use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;

/// One record per invocation, written to `manifest.json` in the output
/// directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub deterministic: bool,
    pub threads: usize,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub exit_status: i32,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            config: None,
            config_hash: None,
            seed: None,
            version: env!("CARGO_PKG_VERSION").into(),
            deterministic: false,
            threads: 1,
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            exit_status: 0,
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(&mut self, elapsed: Duration, status: i32) {
        self.wall_clock_secs = elapsed.as_secs_f64();
        self.exit_status = status;
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
