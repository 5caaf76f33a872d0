//! Per-stage manifests: content hashes of inputs and outputs plus the
//! config snapshot, so a run can be audited and reproduced exactly.
//!
//! Manifests list only deterministic artifacts. Files that embed wall
//! clock (timings.json, training logs) are deliberately left out so two
//! runs with the same seed produce byte-identical manifests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest file {path}: {source}")]
    BadManifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    let io_err = |source| ManifestError::Io {
        action: "read",
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    /// sha256 of the full config snapshot the stage ran under.
    pub config_digest: String,
    /// Input name -> content hash, for upstream artifacts and source files.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> content hash; deterministic artifacts only.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, config_digest: String) -> Self {
        Manifest {
            stage: stage.to_string(),
            seed,
            config_digest,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Records an input file under its file name.
    pub fn add_input(&mut self, path: &Path) -> Result<(), ManifestError> {
        let name = file_name(path);
        let digest = sha256_file(path)?;
        self.inputs.insert(name, digest);
        Ok(())
    }

    /// Records an output file under its file name.
    pub fn add_output(&mut self, path: &Path) -> Result<(), ManifestError> {
        let name = file_name(path);
        let digest = sha256_file(path)?;
        self.outputs.insert(name, digest);
        Ok(())
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, ManifestError> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|source| ManifestError::Io {
            action: "write",
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ManifestError::BadManifest {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        // Standard test vector for the empty string and "abc".
        assert_eq!(
            sha256_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn file_hash_matches_byte_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        let payload = vec![7u8; 100_000];
        std::fs::write(&path, &payload).unwrap();
        assert_eq!(sha256_file(&path).unwrap(), sha256_bytes(&payload));
    }

    #[test]
    fn manifest_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.csv");
        let output = dir.path().join("output.csv");
        std::fs::write(&input, "a,b\n1,2\n").unwrap();
        std::fs::write(&output, "c\n3\n").unwrap();

        let mut m = Manifest::new("augment", 42, sha256_bytes(b"{}"));
        m.add_input(&input).unwrap();
        m.add_output(&output).unwrap();
        let path = m.write(dir.path()).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back, m);

        // Same content rewritten must hash identically.
        let first = sha256_file(&path).unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(sha256_file(&path).unwrap(), first);

        let missing = Manifest::read(&dir.path().join("nope.json"));
        assert!(matches!(missing, Err(ManifestError::Io { .. })));
    }
}
