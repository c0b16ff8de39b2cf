//! Run manifests: what was run, on which inputs, and the hash of every
//! file it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Command;
use crate::error::{Error, Result};
use crate::experiments::ExperimentPlan;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    /// The effective plan after flags were applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ExperimentPlan>,
    /// Absolute input path to SHA-256.
    pub inputs: BTreeMap<PathBuf, String>,
    /// Output path relative to the output directory to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Inputs whose current contents no longer match the recorded hash.
    pub fn changed_inputs(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .filter(|(path, want)| hash_file(path).map_or(true, |got| &got != *want))
            .map(|(path, _)| path.clone())
            .collect()
    }
}

/// Writes files under one output directory and remembers their hashes.
#[derive(Debug)]
pub struct Outputs {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn into_files(self) -> BTreeMap<String, String> {
        self.files
    }
}

/// Records input files and their hashes.
#[derive(Debug, Default)]
pub struct Inputs(BTreeMap<PathBuf, String>);

impl Inputs {
    pub fn add(&mut self, path: &Path) -> Result<()> {
        let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        let hash = hash_file(&abs)?;
        self.0.insert(abs, hash);
        Ok(())
    }

    pub fn into_map(self) -> BTreeMap<PathBuf, String> {
        self.0
    }
}
