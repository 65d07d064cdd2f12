use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::atomic::{sha256_file, write_atomic};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub seed: u64,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config,
            inputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            outputs: Vec::new(),
            started_unix_ms: now_unix_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Stamps the end time and writes the manifest atomically to `path`.
    pub fn finish_at(mut self, path: &Path) -> Result<PathBuf> {
        self.finished_unix_ms = now_unix_ms();
        let path = path.to_path_buf();
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Inputs whose current digest no longer matches the recorded one.
    pub fn stale_inputs(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|i| sha256_file(Path::new(&i.path)).map_or(true, |d| d != i.sha256))
            .map(|i| i.path.clone())
            .collect()
    }
}
