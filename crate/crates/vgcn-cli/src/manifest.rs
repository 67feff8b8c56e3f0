//! Reproducibility manifests: every command that writes files also records
//! how those files were produced, next to them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything needed to re-run a command and reproduce its outputs bitwise
/// (apart from `wall_clock_seconds`, which is informational).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Full argument vector as invoked, excluding the program name.
    pub argv: Vec<String>,
    /// Resolved configuration after defaults and overrides.
    pub config: serde_json::Value,
    /// Seed in effect, when the command is stochastic.
    pub seed: Option<u64>,
    /// Files read.
    pub inputs: Vec<String>,
    /// Files written (the manifest itself is not listed).
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

/// Derive a sibling path by replacing the final extension with `suffix`
/// (e.g. `model.ckpt.json` + `manifest.json` → `model.ckpt.manifest.json`).
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("output");
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().skip(1).collect(),
                config,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                wall_clock_seconds: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.manifest.inputs.push(path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.display().to_string());
        self
    }

    /// Write the manifest next to `primary_out` and return its path.
    pub fn write(mut self, primary_out: &Path) -> Result<PathBuf, CliError> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let path = sibling(primary_out, "manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| CliError::internal(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text)
            .map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
