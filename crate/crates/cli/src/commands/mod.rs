use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use podq::evalkit::EvalError;
use podq::qnet::{NetworkWeights, QnetError};
use podq::tensor::checkpoint::{CheckpointError, Container};
use podq::trainer::TrainError;
use toml::{Table, Value};

use crate::config::{self, RunConfig};
use crate::error::{CliError, Result};
use crate::ConfigArgs;

pub mod compare;
pub mod eval;
pub mod inspect;
pub mod oracle;
pub mod train;

impl ConfigArgs {
    /// Config file contents plus sugar flags; overrides are returned
    /// separately so they apply last.
    fn layers(&self) -> Result<(Table, Vec<(String, Value)>)> {
        let table = match &self.config {
            Some(path) => config::read_table(path)?,
            None => Table::new(),
        };
        let mut overrides = Vec::new();
        if let Some(kind) = &self.mission {
            overrides.push(("mission.kind".to_string(), Value::String(kind.clone())));
        }
        for spec in &self.overrides {
            overrides.push(config::parse_override(spec)?);
        }
        Ok((table, overrides))
    }
}

fn has_key(table: &Table, overrides: &[(String, Value)], key: &str) -> bool {
    if overrides.iter().any(|(k, _)| k == key) {
        return true;
    }
    let mut cur = table;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(Value::Table(t)) if i + 1 < parts.len() => cur = t,
            Some(_) if i + 1 == parts.len() => return true,
            _ => return false,
        }
    }
    false
}

pub(crate) struct Checkpoint {
    pub path: PathBuf,
    pub container: Container,
    pub net: NetworkWeights,
}

pub(crate) fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| CliError::io(path, "opening checkpoint", e))?;
    let container = Container::read_from(BufReader::new(file)).map_err(|e| match e {
        CheckpointError::Io(e) => CliError::io(path, "reading checkpoint", e),
        e => CliError::Data(format!("checkpoint {}: {e}", path.display())),
    })?;
    let net = NetworkWeights::from_container(&container)
        .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
    Ok(Checkpoint {
        path: path.to_path_buf(),
        container,
        net,
    })
}

/// Config for running a checkpoint: the checkpoint fixes the architecture
/// and, unless the config says otherwise, the mission kind and resolution.
pub(crate) fn checkpoint_config(args: &ConfigArgs, ck: &Checkpoint) -> Result<RunConfig> {
    let (mut table, mut overrides) = args.layers()?;
    let arch = ck.net.architecture();
    if has_key(&table, &overrides, "architecture") {
        let resolved = config::resolve(table.clone(), &overrides)?;
        if resolved.architecture != arch {
            return Err(CliError::Usage(format!(
                "config key `architecture` is {} but checkpoint {} holds a {} network",
                resolved.architecture,
                ck.path.display(),
                arch
            )));
        }
    }
    table.insert("architecture".into(), Value::String(arch.id().into()));
    if !has_key(&table, &overrides, "mission.kind") {
        if let Some(kind) = ck.container.meta("mission") {
            overrides.insert(0, ("mission.kind".into(), Value::String(kind.into())));
        }
    }
    if !has_key(&table, &overrides, "mission.resolution") {
        overrides.insert(
            0,
            (
                "mission.resolution".into(),
                Value::Integer(ck.net.resolution() as i64),
            ),
        );
    }
    config::resolve(table, &overrides)
}

pub(crate) fn eval_error(context: &str, e: EvalError) -> CliError {
    match e {
        EvalError::Mismatch(m) => CliError::Usage(format!("{context}: {m}")),
        EvalError::Trace { .. } => CliError::Data(format!("{context}: {e}")),
        EvalError::Qnet(QnetError::Checkpoint(_) | QnetError::Manifest(_)) => {
            CliError::Data(format!("{context}: {e}"))
        }
        e => CliError::Runtime(format!("{context}: {e}")),
    }
}

pub(crate) fn train_error(context: &str, e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => {
            CliError::Usage(format!("{context}: config section `training`: {m}"))
        }
        e => CliError::Runtime(format!("{context}: {e}")),
    }
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, "creating", e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, "writing", e))
}

pub(crate) fn out_err(e: std::io::Error) -> CliError {
    CliError::Runtime(format!("writing output: {e}"))
}

pub(crate) fn checkpoint_name(episode: u64) -> String {
    format!("ep-{episode:06}")
}
