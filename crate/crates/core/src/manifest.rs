//! Run manifest: every pipeline stage records its configuration hash, seed,
//! and the content hash of each file it wrote. Downstream stages consume
//! only manifested inputs, and re-running a stage from its manifest must
//! reproduce the same bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex SHA-256 of a byte slice.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// First 16 hex characters of the SHA-256; used as a compact fingerprint.
pub fn short_hash(bytes: &[u8]) -> String {
    content_hash(bytes)[..16].to_string()
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}

/// Stable hash of any serializable config.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    short_hash(serde_json::to_string(config).expect("config serialize").as_bytes())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    /// Relative output path -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Relative input path -> content hash at the time the stage ran.
    pub inputs: BTreeMap<String, String>,
}

/// Per-run manifest, stored as `manifest.json` in the output directory.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load_or_default(out_dir: &Path) -> Result<Self> {
        let p = Self::path(out_dir);
        if p.exists() {
            Ok(serde_json::from_slice(&std::fs::read(&p)?)?)
        } else {
            Ok(RunManifest::default())
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let file = std::fs::File::create(Self::path(out_dir))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Record a completed stage: hash every named output file.
    pub fn record_stage<T: Serialize>(
        &mut self,
        stage: &str,
        config: &T,
        seed: u64,
        out_dir: &Path,
        outputs: &[&Path],
        inputs: &[&Path],
    ) -> Result<()> {
        let rel = |p: &Path| -> String {
            p.strip_prefix(out_dir).unwrap_or(p).display().to_string()
        };
        let mut rec = StageRecord {
            config_hash: config_hash(config),
            seed,
            ..StageRecord::default()
        };
        for p in outputs {
            rec.outputs.insert(rel(p), hash_file(p)?);
        }
        for p in inputs {
            rec.inputs.insert(rel(p), hash_file(p)?);
        }
        self.stages.insert(stage.to_string(), rec);
        Ok(())
    }

    /// Check that a manifested file still exists and matches its recorded
    /// hash; returns the absolute path.
    pub fn verify_input(&self, out_dir: &Path, stage: &str, rel_path: &str) -> Result<PathBuf> {
        let rec = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::NoResultsFound(format!("{} (stage {stage})", out_dir.display())))?;
        let expected = rec.outputs.get(rel_path).ok_or_else(|| Error::NoResultsFound(format!(
            "{rel_path} not manifested by stage {stage}"
        )))?;
        let abs = out_dir.join(rel_path);
        let actual = hash_file(&abs).map_err(|_| Error::NoResultsFound(format!(
            "{rel_path} listed in manifest but missing"
        )))?;
        if &actual != expected {
            return Err(Error::CorruptResult {
                path: abs.display().to_string(),
                detail: format!("hash {actual} != manifested {expected}"),
            });
        }
        Ok(abs)
    }
}
