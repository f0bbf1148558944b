//! Per-run manifest: what ran, with which configuration, and hashes of what
//! it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    /// Relative to the manifest's directory when possible.
    pub path: String,
    pub sha256: String,
    /// Content depends on wall-clock time and is left out of `output_hash`.
    pub volatile: bool,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub artifacts: Vec<Artifact>,
    /// SHA-256 over the sorted `sha256  path` lines of non-volatile artifacts.
    pub output_hash: String,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    started: u128,
    files: Vec<(PathBuf, bool)>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            started: now_ms(),
            files: Vec::new(),
        })
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.files.push((path.into(), false));
        self
    }

    pub fn volatile_output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.files.push((path.into(), true));
        self
    }

    /// Hashes every recorded output and writes `manifest.json` into `dir`.
    pub fn write(self, dir: &Path) -> Result<RunManifest> {
        let mut artifacts = Vec::with_capacity(self.files.len());
        for (path, volatile) in &self.files {
            let shown = path.strip_prefix(dir).unwrap_or(path);
            artifacts.push(Artifact {
                path: shown.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(path)?,
                volatile: *volatile,
            });
        }
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let mut hasher = Sha256::new();
        for a in artifacts.iter().filter(|a| !a.volatile) {
            hasher.update(format!("{}  {}\n", a.sha256, a.path));
        }
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            artifacts,
            output_hash: format!("{:x}", hasher.finalize()),
        };
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

/// All regular files under `dir`, recursively, in sorted order.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
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
    fn hash_ignores_volatile_files_and_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let log = dir.path().join("log.csv");
        fs::write(&a, b"stable").unwrap();
        let mut hashes = Vec::new();
        for run in 0..2 {
            fs::write(&log, format!("wall {run}")).unwrap();
            let mut b = ManifestBuilder::new("test", serde_json::json!({"k": 1}), Some(3)).unwrap();
            b.output(&a).volatile_output(&log);
            let m = b.write(dir.path()).unwrap();
            assert_eq!(m.artifacts[0].path, "a.bin");
            hashes.push(m.output_hash);
        }
        assert_eq!(hashes[0], hashes[1]);
    }
}
