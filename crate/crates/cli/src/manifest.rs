//! Per-run manifest: resolved configuration, seed, input and artifact
//! hashes, and a first-epoch fingerprint for training runs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const MANIFEST: &str = "manifest.toml";

pub fn sha256_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Name → (absolute path, sha256).
    #[serde(default)]
    pub inputs: BTreeMap<String, (String, String)>,
    /// File name in the run directory → sha256.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    pub config: Config,
}

impl Manifest {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            direction: None,
            fingerprint: None,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let abs = std::fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))?;
        let hash = sha256_file(&abs)?;
        self.inputs.insert(name.into(), (abs.display().to_string(), hash));
        Ok(())
    }

    pub fn with_artifacts(mut self, dir: &Path, names: &[&str]) -> Result<Self> {
        for n in names {
            self.artifacts.insert(n.to_string(), sha256_file(&dir.join(n))?);
        }
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing manifest")?;
        let p = dir.join(MANIFEST);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(toml::from_str(&text)?)
    }
}
