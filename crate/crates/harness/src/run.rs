//! Run directories: every command writes its outputs and a `manifest.json`
//! listing inputs, outputs and their sha256.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub args: Vec<String>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Wall-clock time; kept out of the reports so reruns compare bitwise.
    pub elapsed_seconds: f64,
}

/// Hashes a file, or every file under a directory in path order.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(path, &mut files)?;
    files.sort();
    let mut all = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| HarnessError::io(f, e))?;
        if path.is_dir() {
            all.extend_from_slice(f.strip_prefix(path).unwrap_or(f).to_string_lossy().as_bytes());
        }
        all.extend_from_slice(&bytes);
    }
    Ok(ppm_models::checkpoint::sha256_hex(&all))
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(|e| HarnessError::io(path, e))? {
            let entry = entry.map_err(|e| HarnessError::io(path, e))?;
            collect(&entry.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn record(path: &Path) -> Result<FileRecord> {
    Ok(FileRecord { path: path.display().to_string(), sha256: hash_path(path)? })
}

/// Records of the paths that exist; missing ones are skipped.
pub fn records(paths: &[PathBuf]) -> Vec<FileRecord> {
    paths.iter().filter(|p| p.exists()).filter_map(|p| record(p).ok()).collect()
}
