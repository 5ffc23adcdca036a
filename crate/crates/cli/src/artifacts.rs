//! Run-directory layout, content hashes and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Failure;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_clock_s: f64,
    /// Output path relative to the run directory → sha256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load_or_new(dir: &Path, scenario: &Path) -> Self {
        let existing = fs::read_to_string(dir.join(MANIFEST)).ok().and_then(|t| serde_json::from_str::<Manifest>(&t).ok());
        let mut m = existing.unwrap_or_default();
        m.scenario = scenario.display().to_string();
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        m
    }

    /// Hashes `outputs` (relative to `dir`) and records them under `stage`.
    /// A file rewritten by this stage is dropped from the stage that wrote it before.
    pub fn record(&mut self, dir: &Path, stage: &str, wall_clock_s: f64, outputs: &[PathBuf]) -> Result<(), Failure> {
        let mut rec = StageRecord { wall_clock_s, outputs: BTreeMap::new() };
        for rel in outputs {
            let hash = sha256_file(&dir.join(rel))?;
            rec.outputs.insert(rel.to_string_lossy().replace('\\', "/"), hash);
        }
        for other in self.stages.values_mut() {
            other.outputs.retain(|rel, _| !rec.outputs.contains_key(rel));
        }
        self.stages.insert(stage.to_string(), rec);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).map_err(Failure::json)? + "\n";
        fs::write(dir.join(MANIFEST), text).map_err(|e| Failure::io(&dir.join(MANIFEST), e))
    }

    /// Every recorded artifact exists and still matches its hash.
    pub fn verify(&self, dir: &Path) -> Result<(), String> {
        for (stage, rec) in &self.stages {
            for (rel, hash) in &rec.outputs {
                let actual = sha256_file(&dir.join(rel)).map_err(|f| f.message)?;
                if &actual != hash {
                    return Err(format!("{stage}: {rel} does not match its recorded hash"));
                }
            }
        }
        Ok(())
    }
}

/// sha256 of every file under `dir` except the manifest, keyed by relative path.
pub fn tree_hashes(dir: &Path) -> Result<BTreeMap<String, String>, Failure> {
    fn walk(root: &Path, cur: &Path, out: &mut BTreeMap<String, String>) -> Result<(), Failure> {
        let mut entries: Vec<_> = fs::read_dir(cur)
            .map_err(|e| Failure::io(cur, e))?
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::io(cur, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                if !rel.ends_with(MANIFEST) {
                    out.insert(rel, sha256_file(&p)?);
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
