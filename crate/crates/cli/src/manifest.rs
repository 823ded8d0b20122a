use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub training: u64,
    pub mission: u64,
    pub eval: u64,
}

/// One per run directory; the config snapshot alone reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: String,
    pub status: RunStatus,
    pub seeds: Seeds,
    /// Full resolved config in the same text format `--config` reads.
    pub config: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Files written so far, relative to the run directory.
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: &RunConfig) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Running,
            seeds: Seeds {
                training: config.training.seed,
                mission: config.mission.seed,
                eval: config.eval.seed,
            },
            config: config.to_text(),
            started_unix: unix_now(),
            finished_unix: None,
            outputs: Vec::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, "reading", e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = Self::path(dir);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, "writing", e))
    }

    pub fn run_config(&self, dir: &Path) -> Result<RunConfig> {
        toml::from_str(&self.config).map_err(|e| {
            CliError::Data(format!(
                "manifest {}: config snapshot: {}",
                Self::path(dir).display(),
                e.message()
            ))
        })
    }

    pub fn add_output(&mut self, rel: impl Into<PathBuf>) {
        let rel = rel.into();
        if !self.outputs.contains(&rel) {
            self.outputs.push(rel);
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            v => out.push((key, v.clone())),
        }
    }
}

/// Dotted keys whose values differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    flatten("", &Table::try_from(a).expect("config serializes"), &mut fa);
    flatten("", &Table::try_from(b).expect("config serializes"), &mut fb);
    let mut keys: Vec<String> = fa.iter().chain(fb.iter()).map(|(k, _)| k.clone()).collect();
    keys.sort();
    keys.dedup();
    let get =
        |f: &[(String, Value)], k: &str| f.iter().find(|(x, _)| x == k).map(|(_, v)| v.clone());
    keys.into_iter()
        .filter(|k| get(&fa, k) != get(&fb, k))
        .collect()
}
