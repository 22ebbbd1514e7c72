//! Run manifests: what a command was asked to do, over which inputs.
//!
//! The manifest is written before any work starts so a crashed or failed
//! run still leaves a record; `finished_at` is stamped only on success.
//! With the hashed backend, identical manifest inputs reproduce outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path -> SHA-256 of its content (directories: combined
    /// hash over the sorted file tree).
    pub inputs: BTreeMap<String, String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, inputs: &[&Path]) -> Result<Self> {
        let mut hashes = BTreeMap::new();
        for path in inputs {
            hashes.insert(path.display().to_string(), hash_path(path)?);
        }
        Ok(RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed,
            config,
            inputs: hashes,
            started_at: Utc::now(),
            finished_at: None,
        })
    }

    pub fn path(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("{command}.manifest.json"))
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        fs::write(Self::path(out_dir, &self.command), body)?;
        Ok(())
    }

    /// Stamps the completion time and rewrites the manifest.
    pub fn finish(&mut self, out_dir: &Path) -> Result<()> {
        self.finished_at = Some(Utc::now());
        self.write(out_dir)
    }
}

/// SHA-256 of a file, or of a directory's sorted (relative path, content)
/// stream. Missing inputs are a validation error.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::validation(
            "missing_input",
            format!("input {} does not exist", path.display()),
            vec![],
        ));
    }
    let mut hasher = Sha256::new();
    if path.is_dir() {
        for file in walk_sorted(path)? {
            let rel = file.strip_prefix(path).expect("walked under root");
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hash_file_into(&mut hasher, &file)?;
        }
    } else {
        hash_file_into(&mut hasher, path)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

fn hash_file_into(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let mut file = fs::File::open(path)?;
    io::copy(&mut file, hasher)?;
    Ok(())
}

fn walk_sorted(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}
