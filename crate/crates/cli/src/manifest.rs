//! Run manifests and the output inventory they describe.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use neurotok::{Error, Result};

use crate::config::RunConfig;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the run's output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command-specific arguments, e.g. checkpoint paths.
    pub args: BTreeMap<String, String>,
    pub code_version: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub config: RunConfig,
    pub outputs: Vec<OutputEntry>,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn output(&self, path: &str) -> Option<&OutputEntry> {
        self.outputs.iter().find(|o| o.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Files written by one command. On failure every recorded file is removed.
#[derive(Debug)]
pub struct OutputSet {
    root: PathBuf,
    created_root: bool,
    entries: Vec<OutputEntry>,
}

impl OutputSet {
    pub fn new(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            created_root,
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        // Record before writing so that a half-written file is also removed.
        self.entries.retain(|e| e.path != rel);
        self.entries.push(OutputEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        fs::write(&path, bytes)?;
        Ok(path)
    }

    /// Records `rel`, lets `f` write it and hashes the result.
    pub fn write_with(&mut self, rel: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.entries.retain(|e| e.path != rel);
        self.entries.push(OutputEntry {
            path: rel.to_string(),
            sha256: String::new(),
            bytes: 0,
        });
        f(&path)?;
        let bytes = fs::read(&path)?;
        let e = self.entries.last_mut().expect("just pushed");
        e.sha256 = sha256_hex(&bytes);
        e.bytes = bytes.len() as u64;
        Ok(path)
    }

    pub fn discard(&mut self) {
        for e in self.entries.drain(..) {
            let path = self.root.join(&e.path);
            let _ = fs::remove_file(&path);
            // Subdirectories such as `recon/` go too once empty.
            let mut dir = path.parent();
            while let Some(d) = dir {
                if d == self.root || fs::remove_dir(d).is_err() {
                    break;
                }
                dir = d.parent();
            }
        }
        if self.created_root {
            let _ = fs::remove_dir(&self.root);
        }
    }

    pub fn finish(self) -> Vec<OutputEntry> {
        self.entries
    }
}
