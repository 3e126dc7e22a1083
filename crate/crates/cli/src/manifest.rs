//! Run directories and their manifests.
//!
//! ```text
//! <root>/<name>/
//!   manifest.json
//!   config
//!   metrics.csv
//!   checkpoints/
//!   reports/
//! ```

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use extract_edit::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINTS: &str = "checkpoints";
pub const REPORTS: &str = "reports";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Running,
    Succeeded,
    Failed,
    Paused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub path: String,
    pub step: u64,
    /// Selection score of the weights, when they were validated.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub config: String,
    pub metrics: String,
    pub checkpoints: String,
    pub reports: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub name: String,
    pub status: Status,
    pub error: Option<String>,
    pub seed: Option<u64>,
    pub build: String,
    pub started: u64,
    pub finished: Option<u64>,
    /// Flat `key = value` snapshot of the effective configuration.
    pub config: String,
    pub layout: Layout,
    /// Output files relative to the run directory.
    pub files: Vec<String>,
    pub checkpoints: Vec<CheckpointEntry>,
    pub best: Option<CheckpointEntry>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn build_id() -> String {
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Creates `<root>/<name>`; an existing directory needs `overwrite`.
    pub fn create(root: &Path, name: &str, command: &str, overwrite: bool) -> Result<Run> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Config(format!("bad run name {name:?}")));
        }
        let dir = root.join(name);
        if dir.exists() {
            if !overwrite {
                return Err(Error::Config(format!("{} exists; pass --overwrite to replace it", dir.display())));
            }
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        let run = Run {
            dir,
            manifest: RunManifest {
                command: command.into(),
                name: name.into(),
                status: Status::Running,
                error: None,
                seed: None,
                build: build_id(),
                started: now(),
                finished: None,
                config: String::new(),
                layout: Layout {
                    config: CONFIG.into(),
                    metrics: METRICS.into(),
                    checkpoints: CHECKPOINTS.into(),
                    reports: REPORTS.into(),
                },
                files: Vec::new(),
                checkpoints: Vec::new(),
                best: None,
            },
        };
        run.save()?;
        Ok(run)
    }

    /// Reopens an existing run, e.g. to resume it.
    pub fn open(root: &Path, name: &str) -> Result<Run> {
        let dir = root.join(name);
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)?;
        let mut manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        manifest.status = Status::Running;
        manifest.error = None;
        manifest.finished = None;
        let run = Run { dir, manifest };
        run.save()?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes `contents` to `rel` and lists it in the manifest.
    pub fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, contents)?;
        self.record(rel);
        Ok(())
    }

    pub fn record(&mut self, rel: &str) {
        if !self.manifest.files.iter().any(|f| f == rel) {
            self.manifest.files.push(rel.to_string());
        }
    }

    /// Lists every file below `rel`.
    pub fn record_dir(&mut self, rel: &str) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(self.path(rel))?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let child = format!("{rel}/{}", e.file_name().to_string_lossy());
            if e.file_type()?.is_dir() {
                self.record_dir(&child)?;
            } else {
                self.record(&child);
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(self.dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    /// Records the outcome and writes the manifest; passes `result` through.
    pub fn finish<T>(&mut self, status_ok: Status, result: Result<T>) -> Result<T> {
        let m = &mut self.manifest;
        m.finished = Some(now());
        match &result {
            Ok(_) => m.status = status_ok,
            Err(e) => {
                m.status = Status::Failed;
                m.error = Some(e.to_string());
            }
        }
        self.save()?;
        result
    }
}
