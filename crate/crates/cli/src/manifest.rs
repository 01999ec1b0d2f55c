use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_FORMAT: &str = "kedmd-manifest v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one command invocation and the files it read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command_line: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub versions: BTreeMap<String, String>,
    /// Wall-clock seconds; the only nondeterministic part.
    pub timings_s: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of `path`, recorded relative to `base` when possible.
pub fn hash_file(path: &Path, base: Option<&Path>) -> CliResult<FileHash> {
    let bytes = fs::read(path)?;
    let shown = base
        .and_then(|b| path.strip_prefix(b).ok())
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/");
    Ok(FileHash { path: shown, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
}

impl RunManifest {
    pub fn new(config: serde_json::Value) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("kedmd".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            format: MANIFEST_FORMAT.to_string(),
            command_line: std::env::args().collect(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions,
            timings_s: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(hash_file(path, None)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path, base: Option<&Path>) -> CliResult<()> {
        self.outputs.push(hash_file(path, base)?);
        Ok(())
    }

    pub fn output_hash(&self, path: &str) -> Option<&str> {
        self.outputs.iter().find(|f| f.path == path).map(|f| f.sha256.as_str())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
