use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.json";

/// Git-style object hash: SHA-256 of `"blob <len>\0"` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_path: String,
    pub config_sha256: String,
    /// Effective configuration, including defaults and any seed override.
    pub config: ExperimentConfig,
    pub seed: u64,
    pub wall_time_seconds: f64,
    pub outputs: Vec<OutputFile>,
}

impl Manifest {
    pub fn new(config_path: &Path, config: &ExperimentConfig, out: &Path, files: &[String], wall: f64) -> Result<Self> {
        let raw = std::fs::read(config_path).with_context(|| format!("reading {}", config_path.display()))?;
        let outputs = files
            .iter()
            .map(|f| {
                let bytes = std::fs::read(out.join(f)).with_context(|| format!("hashing {f}"))?;
                Ok(OutputFile {
                    file: f.clone(),
                    sha256: blob_hash(&bytes),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tool: "dgsm",
            version: env!("CARGO_PKG_VERSION"),
            config_path: config_path.display().to_string(),
            config_sha256: blob_hash(&raw),
            config: config.clone(),
            seed: config.seed(),
            wall_time_seconds: wall,
            outputs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
