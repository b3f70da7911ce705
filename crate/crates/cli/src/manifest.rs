//! `run_manifest.json`: what was run, with which seed, and what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use motseg_core::{Error, Result};
use serde::Serialize;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Settings after flags were applied, as TOML.
    pub effective_config: Option<String>,
    pub seed: u64,
    pub parallel: bool,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_path: None,
            effective_config: None,
            seed,
            parallel: motseg_core::autograd::par::is_parallel(),
            started_unix: now(),
            finished_unix: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn with_config(mut self, path: Option<&Path>, effective: &impl Serialize) -> Result<Self> {
        self.config_path = path.map(Path::to_path_buf);
        self.effective_config = Some(toml::to_string(effective).map_err(|e| Error::Format(e.to_string()))?);
        Ok(self)
    }

    /// Writes the manifest into `dir` through a temporary file and a rename.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = now();
        let path = dir.join(MANIFEST_NAME);
        let tmp = dir.join(format!(".{MANIFEST_NAME}.tmp"));
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&tmp, text).map_err(|source| Error::Io { path: tmp.clone(), source })?;
        fs::rename(&tmp, &path).map_err(|source| Error::Io { path, source })
    }
}
