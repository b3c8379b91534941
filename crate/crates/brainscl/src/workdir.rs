//! Run directories and content-addressed stage manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::io::{read_json, write_json};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> AppResult<String> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a serialisable value via its canonical JSON.
pub fn hash_value<T: Serialize + ?Sized>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("value serialises"))
}

/// Record of one completed stage: the key of its inputs and the hashes of
/// every file it wrote, relative to the workdir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub key: String,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn create(root: impl Into<PathBuf>) -> AppResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| AppError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.path(format!("stages/{stage}.json"))
    }

    pub fn manifest(&self, stage: &str) -> Option<StageManifest> {
        read_json(&self.manifest_path(stage)).ok()
    }

    /// Whether `stage` completed with this key and its outputs are intact.
    pub fn is_current(&self, stage: &str, key: &str) -> bool {
        let Some(m) = self.manifest(stage) else { return false };
        m.key == key && m.outputs.iter().all(|(rel, h)| hash_file(&self.path(rel)).map(|x| &x == h).unwrap_or(false))
    }

    /// Hash summarising a completed stage's outputs, for downstream keys.
    pub fn output_key(&self, stage: &str) -> AppResult<String> {
        let m = self.manifest(stage).ok_or_else(|| AppError::MissingArtifacts(vec![format!("stage {stage}")]))?;
        Ok(hash_value(&(&m.key, &m.outputs)))
    }

    pub fn complete(&self, stage: &str, key: &str, files: &[PathBuf], skipped: bool) -> AppResult<()> {
        let mut outputs = BTreeMap::new();
        for f in files {
            let rel = f.strip_prefix(&self.root).unwrap_or(f).to_string_lossy().replace('\\', "/");
            outputs.insert(rel, hash_file(f)?);
        }
        write_json(&self.manifest_path(stage), &StageManifest { stage: stage.into(), key: key.into(), outputs, skipped })
    }

    pub fn clear_stage(&self, stage: &str) -> AppResult<()> {
        let p = self.manifest_path(stage);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| AppError::io(&p, e))?;
        }
        Ok(())
    }
}

/// Files below `dir`, sorted, for stage manifests.
pub fn files_under(dir: &Path) -> AppResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| AppError::io(&d, e))? {
            let p = entry.map_err(|e| AppError::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
