//! Run manifests: what was run, with which config and inputs, and what came out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::sha256_hex;
use super::fsutil;
use crate::error::Result;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: u64,
    pub finished: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub output_dir: PathBuf,
    /// Paths relative to `output_dir`.
    pub artifacts: Vec<FileDigest>,
    pub metrics: Value,
    pub timestamps: Timestamps,
}

impl RunManifest {
    pub fn write(&self) -> Result<()> {
        fsutil::write_json(&self.output_dir.join(RUN_MANIFEST_FILE), self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            walk(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("walked below root").to_path_buf());
        }
    }
    Ok(())
}

/// Sorted relative paths of every file below `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Digests of every file below `dir` except the run manifest itself.
pub fn digest_tree(dir: &Path) -> Result<Vec<FileDigest>> {
    list_files(dir)?
        .into_iter()
        .filter(|p| p.as_os_str() != RUN_MANIFEST_FILE)
        .map(|p| {
            Ok(FileDigest {
                sha256: file_sha256(&dir.join(&p))?,
                path: p.to_string_lossy().replace('\\', "/"),
            })
        })
        .collect()
}

/// One digest for a whole directory tree (paths and contents).
pub fn tree_sha256(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for d in digest_tree(dir)? {
        h.update(d.path.as_bytes());
        h.update([0]);
        h.update(d.sha256.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

pub fn run_id(command: &str, config_hash: &str, seed: u64, args: &[String], inputs: &[FileDigest]) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(config_hash.as_bytes());
    h.update(seed.to_le_bytes());
    for a in args {
        h.update(a.as_bytes());
        h.update([0]);
    }
    for i in inputs {
        h.update(i.sha256.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_digest_tracks_contents_and_names() {
        let dir = tempfile::tempdir().unwrap();
        fsutil::write_atomic(&dir.path().join("a/x.txt"), b"1").unwrap();
        fsutil::write_atomic(&dir.path().join("b.txt"), b"2").unwrap();
        let d1 = tree_sha256(dir.path()).unwrap();
        assert_eq!(d1, tree_sha256(dir.path()).unwrap());
        fsutil::write_atomic(&dir.path().join(RUN_MANIFEST_FILE), b"{}").unwrap();
        assert_eq!(d1, tree_sha256(dir.path()).unwrap());
        fsutil::write_atomic(&dir.path().join("b.txt"), b"3").unwrap();
        assert_ne!(d1, tree_sha256(dir.path()).unwrap());
        let names: Vec<_> = digest_tree(dir.path()).unwrap().into_iter().map(|d| d.path).collect();
        assert_eq!(names, ["a/x.txt", "b.txt"]);
    }
}
