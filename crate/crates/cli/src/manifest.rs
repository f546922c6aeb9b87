use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// What is needed to repeat a run: the command line, the effective
/// configuration and its hash, the seed and the code version.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_toml: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub version: String,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config_toml: String, seed: u64, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config_sha256: sha256_hex(config_toml.as_bytes()),
            config_toml,
            seed,
            threads,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
