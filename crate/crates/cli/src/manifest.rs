use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notes: Option<Value>,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config,
                seeds: Vec::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                wall_clock_s: 0.0,
                notes: None,
            },
        }
    }

    pub fn seed(&mut self, s: u64) -> &mut Self {
        self.manifest.seeds.push(s);
        self
    }

    pub fn input(&mut self, p: impl AsRef<Path>) -> &mut Self {
        self.manifest.inputs.push(p.as_ref().to_path_buf());
        self
    }

    pub fn output(&mut self, p: impl AsRef<Path>) -> &mut Self {
        self.manifest.outputs.push(p.as_ref().to_path_buf());
        self
    }

    pub fn notes(&mut self, v: Value) -> &mut Self {
        self.manifest.notes = Some(v);
        self
    }

    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.manifest.wall_clock_s = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Usage(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}
