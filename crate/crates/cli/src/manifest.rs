//! Per-run manifest and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::Config;

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `git describe --always --dirty` of the working directory, when available.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub seed: u64,
    pub git_describe: String,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    /// `completed`, `interrupted` or `running`.
    pub status: String,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    /// Writes the initial manifest into `dir`.
    pub fn start(dir: &Path, command: &str, config: &Config) -> Result<RunManifest> {
        let m = RunManifest {
            command: command.into(),
            config: config.clone(),
            seed: config.seed,
            git_describe: git_describe(),
            started_at: unix_seconds(),
            finished_at: None,
            status: "running".into(),
            artifacts: Vec::new(),
        };
        write_json_atomic(&dir.join(Self::FILE), &m)?;
        Ok(m)
    }

    pub fn finish(&mut self, dir: &Path, status: &str, artifacts: Vec<PathBuf>) -> Result<()> {
        self.finished_at = Some(unix_seconds());
        self.status = status.into();
        self.artifacts = artifacts;
        write_json_atomic(&dir.join(Self::FILE), self)
    }
}
