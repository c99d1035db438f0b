//! Run manifests: every artifact directory records the command, config,
//! input digests, seeds, and toolkit version that produced it, and every
//! report embeds the manifest's content hash so rows trace back to the
//! computation that produced them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{FamvoteError, Result};

/// Provenance record for one toolkit invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Logical command: subcommand plus semantic flags. Execution-only
    /// knobs (thread caps) are excluded so reruns at any parallelism
    /// write identical bytes.
    pub command: String,
    pub version: String,
    /// Digest of the config file bytes, when a config was given.
    pub config_sha256: Option<String>,
    /// Input path as given on the command line or in config, mapped to
    /// the digest of that file's bytes.
    pub inputs: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Unix seconds; SOURCE_DATE_EPOCH overrides the clock so archived
    /// runs can be reproduced byte-for-byte.
    pub timestamp: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file's bytes.
pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| FamvoteError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

fn timestamp_from(source_date_epoch: Option<&str>) -> Result<u64> {
    match source_date_epoch {
        Some(raw) => raw.trim().parse::<u64>().map_err(|_| {
            FamvoteError::usage(format!("SOURCE_DATE_EPOCH is not an integer: `{raw}`"))
        }),
        None => Ok(std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)),
    }
}

/// Current timestamp, honoring SOURCE_DATE_EPOCH when set.
pub fn now_timestamp() -> Result<u64> {
    let epoch = std::env::var("SOURCE_DATE_EPOCH").ok();
    timestamp_from(epoch.as_deref())
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seeds: Vec<u64>) -> Result<Self> {
        Ok(RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: None,
            inputs: BTreeMap::new(),
            seeds,
            timestamp: now_timestamp()?,
        })
    }

    pub fn record_config(&mut self, path: &Path) -> Result<()> {
        self.config_sha256 = Some(digest_file(path)?);
        Ok(())
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let digest = digest_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Canonical serialized form written to manifest.json.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    /// Content hash embedded in every report: version, config digest,
    /// input digests, and seeds. The command line and timestamp are
    /// provenance only, so the same computation run from a different
    /// directory or at a different time still writes identical reports.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.version.as_bytes());
        hasher.update([0]);
        if let Some(config) = &self.config_sha256 {
            hasher.update(config.as_bytes());
        }
        hasher.update([0]);
        // Digests sorted by value: relocating an input does not change
        // what was computed.
        let mut digests: Vec<&str> = self.inputs.values().map(String::as_str).collect();
        digests.sort_unstable();
        for digest in digests {
            hasher.update(digest.as_bytes());
            hasher.update([0]);
        }
        for seed in &self.seeds {
            hasher.update(seed.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Writes the manifest and returns its hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_json();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|source| FamvoteError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
        }
        fs::write(path, text.as_bytes()).map_err(|source| FamvoteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(self.hash())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| FamvoteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| FamvoteError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn sha256_matches_known_vectors() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn explicit_epoch_overrides_clock() {
        assert_eq!(timestamp_from(Some("1700000000")).unwrap(), 1700000000);
        assert_eq!(timestamp_from(Some(" 42 ")).unwrap(), 42);
        assert!(timestamp_from(Some("not-a-number")).is_err());
        assert!(timestamp_from(None).unwrap() > 1_700_000_000);
    }

    #[test]
    fn save_load_round_trip_preserves_hash() {
        let dir = tempdir().unwrap();
        let input = dir.path().join("input.jsonl");
        fs::write(&input, b"{\"x\":1}\n").unwrap();
        let mut manifest = RunManifest::new("famvote aggregate --method hfv", vec![7]).unwrap();
        manifest.timestamp = 1700000000;
        manifest.record_input(&input).unwrap();
        let path = dir.path().join("manifest.json");
        let hash = manifest.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(loaded.hash(), hash);
        assert_eq!(loaded.inputs.len(), 1);
    }

    #[test]
    fn hash_covers_content_but_not_provenance() {
        let mut a = RunManifest::new("famvote synth", vec![1]).unwrap();
        a.timestamp = 100;
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![2];
        assert_ne!(a.hash(), b.hash());
        b.seeds = vec![1];
        b.config_sha256 = Some("deadbeef".to_string());
        assert_ne!(a.hash(), b.hash());
        // Invocation site and time do not change what was computed.
        b.config_sha256 = None;
        b.command = "famvote synth --out elsewhere".to_string();
        b.timestamp = 999;
        assert_eq!(a.hash(), b.hash());
        // Same bytes under a different path hash identically.
        let mut c = a.clone();
        let mut d = a.clone();
        c.inputs.insert("here/x.jsonl".to_string(), "abc".to_string());
        d.inputs.insert("there/x.jsonl".to_string(), "abc".to_string());
        assert_eq!(c.hash(), d.hash());
    }
}
