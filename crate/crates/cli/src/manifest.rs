//! Run manifests: every pipeline stage records its status, artifact path and
//! content hash, so a finished run can be audited and re-verified.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::formats::SCHEMA_VERSION;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// "ok", "skipped", or "failed: <reason>".
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub requested_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realized_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            stages: Vec::new(),
        }
    }

    pub fn stage_ok(&mut self, name: &str) -> &mut StageRecord {
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: "ok".to_string(),
            artifact: None,
            sha256: None,
            requested_rank: None,
            realized_rank: None,
            verdict: None,
        });
        self.stages.last_mut().expect("just pushed")
    }

    pub fn stage_failed(&mut self, name: &str, reason: &str) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: format!("failed: {reason}"),
            artifact: None,
            sha256: None,
            requested_rank: None,
            realized_rank: None,
            verdict: None,
        });
    }

    pub fn attach_artifact(record: &mut StageRecord, dir: &Path, file_name: &str) -> Result<()> {
        record.artifact = Some(file_name.to_string());
        record.sha256 = Some(sha256_file(&dir.join(file_name))?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::formats::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = crate::formats::read_json(path)?;
        if m.schema_version != SCHEMA_VERSION {
            bail!("unsupported manifest schema {}", m.schema_version);
        }
        Ok(m)
    }

    /// Re-hash every recorded artifact (relative to `dir`) and compare.
    pub fn verify_hashes(&self, dir: &Path) -> Result<()> {
        for stage in &self.stages {
            if let (Some(artifact), Some(expected)) = (&stage.artifact, &stage.sha256) {
                let actual = sha256_file(&dir.join(artifact))?;
                if &actual != expected {
                    bail!("hash mismatch for {artifact}: {actual} != {expected}");
                }
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {path:?}"))?;
    let digest = Sha256::digest(&bytes);
    Ok(hex::encode(digest))
}
