//! Per-stage manifests and content hashing.
//!
//! Every stage writes `<out>/<stage>/manifest.json` recording a key over
//! its inputs and the SHA-256 of each output. Paths are logical: `out/...`
//! relative to the experiment directory, `cache/...` relative to the shared
//! cache, so manifests do not depend on where a run lives.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON rendering; object keys are already sorted by
/// `serde_json`'s default map.
pub fn hash_json(v: &Value) -> String {
    hash_bytes(v.to_string().as_bytes())
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Hash over everything the stage's outputs depend on.
    pub key: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, Artifact>,
    #[serde(default)]
    pub summary: Value,
}

/// Roots that logical artifact paths resolve against.
#[derive(Clone, Debug)]
pub struct Roots {
    pub out: PathBuf,
    pub cache: PathBuf,
}

impl Roots {
    pub fn resolve(&self, logical: &str) -> PathBuf {
        if let Some(rest) = logical.strip_prefix("cache/") {
            self.cache.join(rest)
        } else if let Some(rest) = logical.strip_prefix("out/") {
            self.out.join(rest)
        } else {
            PathBuf::from(logical)
        }
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.out.join(stage).join("manifest.json")
    }

    /// Hashes `logical` on disk into an [`Artifact`].
    pub fn artifact(&self, logical: String) -> Result<Artifact> {
        let sha256 = hash_file(&self.resolve(&logical))?;
        Ok(Artifact { path: logical, sha256 })
    }

    /// Reads a stage manifest, or reports the stage as missing.
    pub fn load(&self, stage: &'static str, what: &str) -> Result<Manifest> {
        let path = self.manifest_path(stage);
        let text = fs::read_to_string(&path).map_err(|_| PipelineError::MissingArtifact {
            stage,
            what: what.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::StaleArtifact {
            path: path.display().to_string(),
            expected: "a readable manifest".into(),
            found: e.to_string(),
        })
    }

    /// Checks that every output of `m` is present with the recorded hash.
    pub fn verify(&self, m: &Manifest) -> Result<()> {
        for a in m.outputs.values() {
            let path = self.resolve(&a.path);
            let found = hash_file(&path).map_err(|_| PipelineError::MissingArtifact {
                stage: stage_name(&m.stage),
                what: a.path.clone(),
            })?;
            if found != a.sha256 {
                return Err(PipelineError::StaleArtifact {
                    path: a.path.clone(),
                    expected: a.sha256.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// The existing manifest of `stage` if it has key `key` and all of its
    /// outputs are intact.
    pub fn hit(&self, stage: &str, key: &str) -> Option<Manifest> {
        let text = fs::read_to_string(self.manifest_path(stage)).ok()?;
        let m: Manifest = serde_json::from_str(&text).ok()?;
        (m.key == key && self.verify(&m).is_ok()).then_some(m)
    }

    pub fn write(&self, m: &Manifest) -> Result<()> {
        let path = self.manifest_path(&m.stage);
        fs::create_dir_all(path.parent().expect("stage dir"))?;
        let mut text = serde_json::to_string_pretty(m).expect("manifest serialises");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

fn stage_name(s: &str) -> &'static str {
    crate::pipeline::STAGES
        .iter()
        .copied()
        .find(|n| *n == s)
        .unwrap_or("all")
}
