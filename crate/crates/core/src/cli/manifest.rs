//! Run manifests and staged output directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

const MODULES: [&str; 7] = ["frames", "latent", "likelihood", "inference", "simgen", "eval", "cli"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// What a run read and wrote. Paths of outputs are relative to the output
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub schema_version: u32,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub modules: BTreeMap<String, String>,
    /// From `SOURCE_DATE_EPOCH`; absent when unset so reruns stay identical.
    pub created: Option<String>,
    /// Effective settings after command-line overrides.
    pub settings: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&[u8]>, seed: Option<u64>, settings: serde_json::Value) -> Self {
        let version = env!("CARGO_PKG_VERSION").to_string();
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            command: command.to_string(),
            schema_version: super::config::SCHEMA_VERSION,
            config_sha256: config.map(sha256_hex),
            seed,
            modules: MODULES.iter().map(|m| (m.to_string(), version.clone())).collect(),
            created: source_date(),
            settings,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, label: impl Into<String>, bytes: &[u8]) {
        self.inputs.push(FileRecord {
            path: label.into(),
            sha256: sha256_hex(bytes),
        });
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn source_date() -> Option<String> {
    let secs: i64 = std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()?;
    chrono::DateTime::from_timestamp(secs, 0).map(|t| t.to_rfc3339())
}

/// Writes into a hidden sibling directory and moves it into place on
/// `commit`, so a failed run leaves no partial outputs behind.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path, overwrite: bool) -> Result<Self, String> {
        if target.exists() {
            let nonempty = fs::read_dir(target)
                .map_err(|e| format!("cannot read {}: {e}", target.display()))?
                .next()
                .is_some();
            if nonempty {
                if !overwrite {
                    return Err(format!(
                        "output directory {} is not empty; pass --overwrite to replace it",
                        target.display()
                    ));
                }
                if !target.join(MANIFEST_NAME).is_file() {
                    return Err(format!(
                        "refusing to overwrite {}: it has no {MANIFEST_NAME} from an earlier run",
                        target.display()
                    ));
                }
            }
        }
        let name = target
            .file_name()
            .ok_or_else(|| format!("bad output path {}", target.display()))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
        let dir = parent.join(format!(".{name}.partial"));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| format!("cannot clear {}: {e}", dir.display()))?;
        }
        fs::create_dir(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        Ok(Staging {
            target: target.to_path_buf(),
            dir,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Lists every staged file in the manifest, writes it and moves the
    /// directory to its target.
    pub fn commit(mut self, mut manifest: RunManifest) -> Result<PathBuf, String> {
        let mut files = Vec::new();
        collect_files(&self.dir, &self.dir, &mut files)?;
        files.sort();
        manifest.outputs = files
            .into_iter()
            .filter(|rel| rel != MANIFEST_NAME)
            .map(|rel| {
                let bytes = fs::read(self.dir.join(&rel)).map_err(|e| format!("cannot read {rel}: {e}"))?;
                Ok(FileRecord {
                    path: rel,
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<_, String>>()?;
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?;
        text.push('\n');
        fs::write(self.dir.join(MANIFEST_NAME), text).map_err(|e| format!("cannot write manifest: {e}"))?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .map_err(|e| format!("cannot replace {}: {e}", self.target.display()))?;
        }
        fs::rename(&self.dir, &self.target).map_err(|e| format!("cannot move outputs into place: {e}"))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), String> {
    let entries = fs::read_dir(dir).map_err(|e| format!("cannot list {}: {e}", dir.display()))?;
    for entry in entries {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).map_err(|e| e.to_string())?;
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}
