//! Artifact paths, completion markers and shared command context.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use cloudcast::models::sha256_hex;

use crate::config::RunConfig;

/// Everything a command needs besides its own arguments.
#[derive(Debug, Clone)]
pub struct Context {
    pub workdir: PathBuf,
    pub config: RunConfig,
    pub force: bool,
    pub jobs: usize,
}

impl Context {
    pub fn traces_dir(&self) -> PathBuf {
        self.config.data_dir(&self.workdir).join("traces")
    }

    pub fn trace_path(&self, cluster: &str) -> PathBuf {
        self.traces_dir().join(format!("{cluster}.csv"))
    }

    pub fn bundles_dir(&self, mode: &str) -> PathBuf {
        self.config.data_dir(&self.workdir).join("bundles").join(mode)
    }

    pub fn bundle_dir(&self, mode: &str, cluster: &str) -> PathBuf {
        self.bundles_dir(mode).join(cluster)
    }

    pub fn run_root(&self) -> PathBuf {
        self.config.run_root(&self.workdir)
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.run_root().join("evaluation")
    }

    pub fn bench_dir(&self) -> PathBuf {
        self.run_root().join("bench")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.run_root().join("report")
    }

    pub fn search_dir(&self) -> PathBuf {
        self.run_root().join("search")
    }

    /// Cluster ids with a trace CSV, sorted.
    pub fn trace_clusters(&self) -> Result<Vec<String>> {
        let dir = self.traces_dir();
        let mut out = Vec::new();
        if dir.is_dir() {
            for entry in fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "csv") {
                    if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                        out.push(stem.to_string());
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Cluster ids with a completed bundle for `mode`, sorted.
    pub fn bundle_clusters(&self, mode: &str) -> Result<Vec<String>> {
        let dir = self.bundles_dir(mode);
        let mut out = Vec::new();
        if dir.is_dir() {
            for entry in fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.join(DONE).exists() {
                    if let Some(name) = p.file_name().and_then(|s| s.to_str()) {
                        out.push(name.to_string());
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Completion marker file name inside an artifact directory.
pub const DONE: &str = ".done";

/// Content hash of any serializable value.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

/// Whether the step guarded by `marker` is already complete.
///
/// A marker with the same hash means the outputs are current; a different
/// hash is refused unless `force` is set.
pub fn already_done(marker: &Path, hash: &str, force: bool) -> Result<bool> {
    if force || !marker.exists() {
        return Ok(false);
    }
    let stored = fs::read_to_string(marker)?;
    if stored.trim() == hash {
        return Ok(true);
    }
    bail!(
        "{} was produced by a different configuration (hash {} vs {}); pass --force to overwrite",
        marker.parent().unwrap_or(marker).display(),
        short(stored.trim()),
        short(hash)
    )
}

pub fn mark_done(marker: &Path, hash: &str) -> Result<()> {
    if let Some(parent) = marker.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(marker, format!("{hash}\n"))?;
    Ok(())
}

pub fn read_marker(marker: &Path) -> Option<String> {
    fs::read_to_string(marker).ok().map(|s| s.trim().to_string())
}

pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Every directory below `root` (inclusive) holding `file`.
pub fn find_dirs_with(root: &Path, file: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if !dir.is_dir() {
            continue;
        }
        if dir.join(file).exists() {
            out.push(dir.clone());
        }
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("x").join(DONE);
        assert!(!already_done(&m, "abc", false).unwrap());
        mark_done(&m, "abc").unwrap();
        assert!(already_done(&m, "abc", false).unwrap());
        assert!(already_done(&m, "def", false).is_err());
        assert!(!already_done(&m, "def", true).unwrap());
        assert_eq!(find_dirs_with(dir.path(), DONE).unwrap(), vec![dir.path().join("x")]);
    }
}
