//! Run directories and their manifest.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_ENV: &str = "SPECTRA_RESULTS_DIR";
pub const DEFAULT_RESULTS_DIR: &str = "results";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub env_step: usize,
    /// Relative to the run directory.
    pub path: Option<String>,
    pub sha256: String,
}

/// Everything needed to identify and rerun a run. Paths are relative to the
/// run directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// Resolved key-value configuration, overrides applied.
    pub config: String,
    pub resolved: serde_json::Value,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<CheckpointEntry>,
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(run_id: &str, command: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            command: command.to_string(),
            config: String::new(),
            resolved: serde_json::Value::Null,
            seeds: Vec::new(),
            checkpoints: Vec::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Output root: `--results-dir`, else `SPECTRA_RESULTS_DIR`, else
/// `./results`.
pub fn results_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(RESULTS_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_RESULTS_DIR),
    }
}

pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn create(root: &Path, run_id: &str, command: &str) -> Result<Self> {
        let path = root.join(run_id);
        std::fs::create_dir_all(&path)
            .with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self {
            path,
            manifest: RunManifest::new(run_id, command),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.path)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    }

    /// Write pretty JSON to `name` and list it in the manifest.
    pub fn write_json<T: Serialize>(&mut self, key: &str, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)? + "\n")?;
        self.record(key, &p);
        Ok(p)
    }

    /// Serialize rows to a headed CSV and list it in the manifest.
    pub fn write_csv<T: Serialize>(&mut self, key: &str, name: &str, rows: &[T]) -> Result<PathBuf> {
        let p = self.file(name);
        let mut w = csv::Writer::from_path(&p)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.record(key, &p);
        Ok(p)
    }

    pub fn record(&mut self, key: &str, path: &Path) {
        let rel = self.relative(path);
        self.manifest.files.insert(key.to_string(), rel);
    }

    pub fn add_checkpoints(&mut self, records: &[spectra_core::trainer::CheckpointRecord]) {
        for r in records {
            let path = r.path.as_deref().map(|p| self.relative(p));
            self.manifest.checkpoints.push(CheckpointEntry {
                env_step: r.env_step,
                path,
                sha256: r.hash.clone(),
            });
        }
    }

    pub fn finish(self) -> Result<PathBuf> {
        let p = self.file(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(self.path)
    }
}
