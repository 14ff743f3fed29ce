//! Run manifests: what was run, with which inputs, and what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Digest of the flags and any config file contents.
    pub config_sha256: String,
    pub flags: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path, shown: String) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(FileDigest {
        path: shown,
        sha256: sha256_hex(&bytes),
    })
}

impl Manifest {
    pub fn new<A: Serialize>(command: &str, flags: &A, seed: Option<u64>, config_text: Option<&str>) -> Self {
        let flags = serde_json::to_value(flags).unwrap_or(serde_json::Value::Null);
        let mut h = Sha256::new();
        h.update(flags.to_string().as_bytes());
        if let Some(text) = config_text {
            h.update(text.as_bytes());
        }
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
            flags,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(file_digest(path, path.display().to_string())?);
        Ok(())
    }

    /// Records outputs by path relative to `base`.
    pub fn outputs(&mut self, base: &Path, paths: &[PathBuf]) -> Result<(), CliError> {
        for p in paths {
            let shown = p.strip_prefix(base).unwrap_or(p).display().to_string();
            self.outputs.push(file_digest(p, shown)?);
        }
        Ok(())
    }

    pub fn note<V: Serialize>(&mut self, key: &str, value: V) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        egomotion::dataio::container::write_atomic(path, format!("{text}\n").as_bytes())?;
        Ok(path.to_path_buf())
    }
}
