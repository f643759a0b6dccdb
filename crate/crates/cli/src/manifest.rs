use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one invocation, written before any work starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// SHA-256 of the effective configuration as compact JSON.
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_at: String,
    pub outputs: Vec<PathBuf>,
}

pub fn version() -> String {
    let rev = env!("LST_GIT_REV");
    if rev.is_empty() {
        format!("v{}", env!("CARGO_PKG_VERSION"))
    } else {
        format!("v{}-g{rev}", env!("CARGO_PKG_VERSION"))
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config_hash: Option<String>, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_hash,
            seed,
            version: version(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            outputs,
        }
    }

    /// Writes the manifest to `path`, or as one JSON line on stderr when the
    /// command has no output location.
    pub fn write(&self, path: Option<&Path>) -> Result<()> {
        match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                }
                let json = serde_json::to_string_pretty(self)?;
                std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))
            }
            None => {
                eprintln!("manifest: {}", serde_json::to_string(self)?);
                Ok(())
            }
        }
    }
}

/// Manifest location next to a file output: `<file>.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}
