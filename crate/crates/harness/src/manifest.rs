//! Per-run manifest: config snapshot, seed, artifacts and source revision.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use anyhow::Result;
use serde::Serialize;

use crate::config::LabConfig;

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub precision: String,
    pub git: String,
    /// Effective config as TOML.
    pub config: String,
    /// Artifact role to file name inside the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &LabConfig, seed: u64) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            seed,
            precision: cfg.precision()?.name().to_string(),
            git: git_describe(),
            config: cfg.to_toml(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn artifact(&mut self, role: &str, file: &str) {
        self.artifacts.insert(role.to_string(), file.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.manifest.json", self.command));
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// `git describe --always --dirty`, or `unknown` outside a work tree.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}
