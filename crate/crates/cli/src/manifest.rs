//! Run manifests: what was run, on which inputs, producing which outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FORMAT: &str = "oncoclip-run-1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub format: &'static str,
    pub command: String,
    pub tool_version: &'static str,
    /// SHA-256 of the resolved configuration JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    /// Definition version of every metric the command reports.
    pub metrics: BTreeMap<&'static str, &'static str>,
    /// Output paths are relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            format: MANIFEST_FORMAT,
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: sha256_hex(&serde_json::to_vec(&config)?),
            config,
            seed,
            inputs: Vec::new(),
            metrics: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: file_digest(path)? });
        Ok(())
    }

    pub fn metric(&mut self, name: &'static str, version: &'static str) {
        self.metrics.insert(name, version);
    }

    /// Records outputs relative to `base` and writes `manifest_path`.
    pub fn finish(&mut self, base: &Path, outputs: &[PathBuf], manifest_path: &Path) -> Result<()> {
        for p in outputs {
            let rel = p.strip_prefix(base).unwrap_or(p);
            self.outputs.push(FileDigest { path: rel.display().to_string(), sha256: file_digest(p)? });
        }
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(manifest_path, bytes)?;
        Ok(())
    }
}
