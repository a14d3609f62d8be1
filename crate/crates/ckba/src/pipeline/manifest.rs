//! Run manifests: artifact checksums, query accounting, wall-clock records.
//!
//! Every stage registers the artifacts it wrote; downstream stages call
//! [`RunManifest::require`] to verify the upstream files still exist with
//! matching checksums before consuming them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::hex_digest;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    /// Stage that produced the artifact.
    pub stage: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub rng: String,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub query_counts: BTreeMap<String, u64>,
    pub wall_clock_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            rng: crate::rng::GENERATOR_NAME.to_string(),
            artifacts: BTreeMap::new(),
            query_counts: BTreeMap::new(),
            wall_clock_seconds: BTreeMap::new(),
        }
    }

    /// Loads the manifest of an existing run and checks it was produced by
    /// the same config.
    pub fn load(out: &Path, expected_config_hash: &str, stage: &str) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.config_hash != expected_config_hash {
            return Err(Error::StaleArtifact {
                stage: stage.to_string(),
                path,
                problem: format!(
                    "run was produced by config {} but the current config hashes to {}",
                    &manifest.config_hash[..12.min(manifest.config_hash.len())],
                    &expected_config_hash[..12]
                ),
            });
        }
        Ok(manifest)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        let tmp = path.with_extension("tmp");
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Registers an artifact (file or directory) by checksum.
    pub fn record(&mut self, out: &Path, name: &str, relpath: &str, stage: &str) -> Result<()> {
        let sha256 = hash_path(&out.join(relpath))?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                path: relpath.to_string(),
                sha256,
                stage: stage.to_string(),
            },
        );
        Ok(())
    }

    /// Verifies a previously recorded artifact and returns its absolute path.
    pub fn require(&self, out: &Path, name: &str, stage: &str) -> Result<PathBuf> {
        let entry = self.artifacts.get(name).ok_or_else(|| Error::StaleArtifact {
            stage: stage.to_string(),
            path: out.join(name),
            problem: "missing from the manifest".to_string(),
        })?;
        let path = out.join(&entry.path);
        let actual = hash_path(&path).map_err(|_| Error::StaleArtifact {
            stage: stage.to_string(),
            path: path.clone(),
            problem: "missing on disk".to_string(),
        })?;
        if actual != entry.sha256 {
            return Err(Error::StaleArtifact {
                stage: stage.to_string(),
                path,
                problem: "checksum mismatch with the manifest".to_string(),
            });
        }
        Ok(path)
    }
}

/// SHA-256 of a file, or of a directory as the digest of its sorted
/// `(name, digest)` pairs.
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(hex_digest(&bytes));
    }
    let mut entries: Vec<(String, String)> = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        entries.push((name, hash_path(&entry.path())?));
    }
    entries.sort();
    let mut hasher = Sha256::new();
    for (name, digest) in entries {
        hasher.update(name.as_bytes());
        hasher.update(b"=");
        hasher.update(digest.as_bytes());
        hasher.update(b";");
    }
    let mut out = String::with_capacity(64);
    for b in hasher.finalize() {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}
