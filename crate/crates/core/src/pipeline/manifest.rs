//! Run manifests: what a stage read, what it wrote and what it measured.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Profile;
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Row label → column header → value, as displayed (percentages already scaled).
pub type MetricRows = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output root, `/`-separated.
    pub path: String,
    pub sha256: String,
}

/// No timestamps or absolute paths, so identical runs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Report table the metric rows belong to.
    pub track: String,
    pub profile: Profile,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<FileRecord>,
    pub artifacts: Vec<FileRecord>,
    pub metrics: MetricRows,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Hash of a config value's canonical JSON (object keys sorted).
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(sha256_hex(&serde_json::to_vec(&canonical)?))
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

pub(super) fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every file under `dir` except its own manifest, sorted by path.
pub fn list_artifacts(root: &Path, dir: &Path) -> Result<Vec<FileRecord>> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let own = dir.join(MANIFEST_FILE);
    files
        .into_iter()
        .filter(|p| *p != own)
        .map(|p| Ok(FileRecord { path: relative(root, &p), sha256: file_sha256(&p)? }))
        .collect()
}

pub fn record(root: &Path, path: &Path) -> Result<FileRecord> {
    Ok(FileRecord { path: relative(root, path), sha256: file_sha256(path)? })
}
