//! `run_manifest.json`: one per output directory, written when a command
//! starts and rewritten when it ends.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dsaf::data::sha256_hex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub command_line: Vec<String>,
    /// Config after defaults and command-line overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    /// SHA-256 of every other file in the directory, by relative path.
    pub artifacts: BTreeMap<String, String>,
    #[serde(skip)]
    dir: PathBuf,
}

impl RunManifest {
    /// Creates `dir` if needed and writes the opening manifest.
    pub fn start(dir: &Path, command: &str, config: serde_json::Value, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let m = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            command_line: std::env::args().collect(),
            config,
            seed,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
            artifacts: BTreeMap::new(),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    /// Records the outcome and artifact hashes, then passes `result` on.
    pub fn finish<T>(mut self, result: Result<T>) -> Result<T> {
        self.finished_at = Some(now());
        match &result {
            Ok(_) => self.status = RunStatus::Completed,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(format!("{e:#}"));
            }
        }
        self.artifacts = hash_artifacts(&self.dir)?;
        self.write()?;
        result
    }

    fn write(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("cannot write {}", path.display()))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = std::fs::read(entry.path()).with_context(|| format!("cannot read {}", entry.path().display()))?;
        out.insert(rel, sha256_hex(&bytes));
    }
    Ok(out)
}
