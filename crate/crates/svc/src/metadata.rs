//! Run metadata written next to every command-line output: the exact
//! arguments, seeds, resolved configuration and versions needed to
//! reproduce the outputs, plus content hashes of the files written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub args: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub versions: BTreeMap<String, String>,
    pub rng: String,
    pub created_at: String,
    /// Output path -> SHA-256 of its contents.
    pub outputs: BTreeMap<PathBuf, String>,
}

impl RunMetadata {
    pub fn new(command: &str) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("qrgmm".into(), qrgmm::VERSION.into());
        versions.insert("qrgmm-svc".into(), env!("CARGO_PKG_VERSION").into());
        RunMetadata {
            command: command.into(),
            args: std::env::args().collect(),
            seeds: BTreeMap::new(),
            config: serde_json::Value::Null,
            versions,
            rng: "chacha8".into(),
            created_at: crate::registry::now_rfc3339(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    pub fn config(mut self, config: impl Serialize) -> Self {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        self
    }

    /// Records the hash of an output file that has already been written.
    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        let digest = Sha256::digest(std::fs::read(path)?);
        self.outputs.insert(path.to_path_buf(), hex::encode(digest));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }
}

/// `out.csv` -> `out.csv.meta.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}
