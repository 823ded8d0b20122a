//! Run configuration: a profile supplies defaults for the chosen mission and
//! architecture, then the config file and `--override key=value` pairs are
//! layered on top using the same dotted keys.

use std::path::Path;

use podq::env::{Mission, MissionKind};
use podq::qnet::Architecture;
use podq::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Episode counts sized for a desktop CPU.
    Desk,
    /// The paper's episode counts and checkpoint milestones.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub episodes: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Evaluate every checkpoint once training finishes.
    pub after_training: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 100,
            repeats: 3,
            seed: 10_000,
            after_training: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub architecture: Architecture,
    pub mission: Mission,
    pub training: TrainingConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    /// Built-in defaults for one mission and architecture.
    pub fn profile(profile: Profile, kind: MissionKind, arch: Architecture) -> Self {
        let mission = Mission::preset(kind);
        let base = TrainingConfig::default();
        let training = match (profile, kind) {
            (Profile::Desk, MissionKind::Basic) => TrainingConfig {
                episodes: 5_000,
                checkpoints: vec![1_000, 2_500, 5_000],
                anneal_steps: 50_000,
                ..base
            },
            (Profile::Desk, MissionKind::CliffWalking) => TrainingConfig {
                episodes: 8_000,
                checkpoints: vec![2_000, 5_000, 8_000],
                anneal_steps: 60_000,
                ..base
            },
            (Profile::Paper, MissionKind::Basic) => TrainingConfig {
                episodes: 15_000,
                checkpoints: vec![5_000, 10_000, 15_000],
                anneal_steps: 150_000,
                ..base
            },
            (Profile::Paper, MissionKind::CliffWalking) => TrainingConfig {
                episodes: 25_000,
                checkpoints: vec![10_000, 20_000, 25_000],
                anneal_steps: 250_000,
                ..base
            },
            (_, MissionKind::CueCorridor) => TrainingConfig {
                episodes: 4_000,
                checkpoints: vec![1_000, 2_000, 4_000],
                prefill_steps: 2_000,
                anneal_steps: 10_000,
                target_sync: 1_000,
                replay_capacity: 20_000,
                ..base
            },
        };
        Self {
            profile,
            architecture: arch,
            mission,
            training,
            eval: EvalSettings::default(),
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        CliError::Usage(format!("override `{spec}` is not of the form key=value"))
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!(
            "override `{spec}` has an empty key"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    let mut path = String::new();
    for p in parts {
        if !path.is_empty() {
            path.push('.');
        }
        path.push_str(p);
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("config key `{path}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn str_at<'a>(table: &'a Table, path: &[&str]) -> Result<Option<&'a str>> {
    let mut cur = table;
    for (i, p) in path.iter().enumerate() {
        match cur.get(*p) {
            None => return Ok(None),
            Some(Value::Table(t)) if i + 1 < path.len() => cur = t,
            Some(Value::String(s)) if i + 1 == path.len() => return Ok(Some(s)),
            Some(_) => {
                return Err(CliError::Usage(format!(
                    "config key `{}` has the wrong type",
                    path[..=i].join(".")
                )))
            }
        }
    }
    Ok(None)
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::io(path, "reading config", e))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.message())))
}

/// Layers profile defaults, the user table and overrides into a config.
pub fn resolve(mut user: Table, overrides: &[(String, Value)]) -> Result<RunConfig> {
    for (k, v) in overrides {
        set_dotted(&mut user, k, v.clone())?;
    }
    let profile = match str_at(&user, &["profile"])? {
        Some("desk") | None => Profile::Desk,
        Some("paper") => Profile::Paper,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "config key `profile`: unknown profile `{other}` (expected desk or paper)"
            )))
        }
    };
    let arch: Architecture = match str_at(&user, &["architecture"])? {
        Some(s) => s
            .parse()
            .map_err(|e| CliError::Usage(format!("config key `architecture`: {e}")))?,
        None => Architecture::StackedDqn,
    };
    let kind: MissionKind = match str_at(&user, &["mission", "kind"])? {
        Some(s) => s
            .parse()
            .map_err(|e| CliError::Usage(format!("config key `mission.kind`: {e}")))?,
        None => MissionKind::Basic,
    };
    // aliases accepted by the parsers are stored under their canonical ids
    set_dotted(&mut user, "architecture", Value::String(arch.id().into()))?;
    set_dotted(&mut user, "mission.kind", Value::String(kind.id().into()))?;
    let base = RunConfig::profile(profile, kind, arch);
    let mut table = Table::try_from(&base).expect("config serializes");
    merge(&mut table, user);
    let config: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
    config
        .mission
        .validate()
        .map_err(|e| CliError::Usage(format!("config section `mission`: {e}")))?;
    config
        .training
        .validate()
        .map_err(|e| CliError::Usage(format!("config section `training`: {e}")))?;
    if config.eval.repeats == 0 || config.eval.episodes == 0 {
        return Err(CliError::Usage(
            "config keys `eval.repeats` and `eval.episodes` must be positive".into(),
        ));
    }
    Ok(config)
}
