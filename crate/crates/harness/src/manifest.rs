//! Run manifests and atomic file writes.
//!
//! Every run directory gets a `manifest.json` listing each artifact with its
//! size and SHA-256, plus the hash of the materialized config. Writes go
//! through a temp file in the same directory followed by a rename.

use mra_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub artifacts: Vec<ManifestEntry>,
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::state(format!("creating {}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::state(format!("temp file in {}: {e}", dir.display())))?;
    std::io::Write::write_all(&mut tmp, bytes)
        .map_err(|e| Error::state(format!("writing {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| Error::state(format!("renaming into {}: {e}", path.display())))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Walks `run_dir` (one level of subdirectories is enough for run layouts),
/// hashing everything except the manifest itself.
pub fn write_manifest(run_dir: &Path, config_sha256: &str) -> Result<Manifest> {
    let mut artifacts = Vec::new();
    collect(run_dir, run_dir, &mut artifacts)?;
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { config_sha256: config_sha256.to_string(), artifacts };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::state(format!("encoding manifest: {e}")))?;
    atomic_write(&run_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> Result<()> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::state(format!("reading {}: {e}", dir.display())))?;
    for entry in entries.filter_map(|e| e.ok()) {
        let path = entry.path();
        if path.is_dir() {
            collect(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().to_string();
        if rel == "manifest.json" {
            continue;
        }
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::state(format!("reading {}: {e}", path.display())))?;
        out.push(ManifestEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_artifacts_with_checksums() {
        let dir = tempfile::tempdir().unwrap();
        atomic_write(&dir.path().join("a.txt"), b"alpha").unwrap();
        atomic_write(&dir.path().join("sub/b.txt"), b"beta").unwrap();
        let m = write_manifest(dir.path(), "cfg123").unwrap();
        assert_eq!(m.artifacts.len(), 2);
        assert_eq!(m.artifacts[0].path, "a.txt");
        assert_eq!(m.artifacts[0].sha256, sha256_hex(b"alpha"));
        assert!(dir.path().join("manifest.json").exists());

        // Regenerating after adding a file picks it up and skips the manifest.
        atomic_write(&dir.path().join("c.txt"), b"gamma").unwrap();
        let m2 = write_manifest(dir.path(), "cfg123").unwrap();
        assert_eq!(m2.artifacts.len(), 3);
        assert!(m2.artifacts.iter().all(|a| a.path != "manifest.json"));
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
    }
}
