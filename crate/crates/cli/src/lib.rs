//! `podq` command-line driver: train, eval, inspect, oracle and compare.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod config;
pub mod error;
pub mod manifest;

mod commands;

pub use error::{CliError, Result};

/// Environment variable naming the default root for run directories.
pub const RUNS_DIR_VAR: &str = "PODQ_RUNS_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "podq",
    version,
    about = "Deep Q-learning agents for partially observable grid worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent and write a run directory.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint or of every checkpoint in a run.
    Eval(EvalArgs),
    /// Write a per-step decision trace for a checkpoint.
    Inspect(InspectArgs),
    /// BFS optima and tabular Q-learning results for a mission.
    Oracle(OracleArgs),
    /// Tabulate evaluation reports of several runs as CSV.
    Compare(CompareArgs),
}

/// Flags shared by every command that resolves a config.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file (TOML with `[mission]`, `[training]` and `[eval]` sections).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set any config key, e.g. `training.gamma=0.95`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `mission.kind`.
    #[arg(long, value_name = "KIND")]
    mission: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Shorthand for `architecture` (simple-dqn, stacked-dqn, drqn).
    #[arg(long, value_name = "ARCH")]
    arch: Option<String>,
    /// Shorthand for `profile` (desk or paper).
    #[arg(long)]
    profile: Option<String>,
    /// Shorthand for `training.episodes`.
    #[arg(long)]
    episodes: Option<u64>,
    /// Shorthand for `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to `$PODQ_RUNS_DIR/<mission>-<arch>-s<seed>`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Reuse an existing run directory whose manifest matches the config.
    #[arg(long)]
    resume: bool,
    /// No per-window progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(required_unless_present = "run", conflicts_with = "run")]
    checkpoint: Option<PathBuf>,
    /// Evaluate every checkpoint of this run directory into its `eval/`.
    #[arg(long, value_name = "DIR")]
    run: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Episodes per repeat [default: 100].
    #[arg(long)]
    episodes: Option<usize>,
    /// Repeats [default: 3].
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    /// Trace every n-th episode.
    #[arg(long, default_value_t = 50)]
    every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append the trace to this file instead of printing it.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Tabular Q-learning episodes.
    #[arg(long, default_value_t = 200_000)]
    episodes: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Also write the report here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Completed run directories, one table row each, in order.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    /// Also write the CSV here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, writing its
/// primary output to `stdout`. Help and version requests print and succeed.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(stdout, "{}", e.render()).map_err(|e| CliError::Runtime(e.to_string()))?;
            return Ok(());
        }
        Err(e) => {
            return Err(CliError::Usage(
                e.render().to_string().trim_end().to_string(),
            ))
        }
    };
    let words: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match cli.command {
        Command::Train(a) => commands::train::run(a, words, stdout),
        Command::Eval(a) => commands::eval::run(a, stdout),
        Command::Inspect(a) => commands::inspect::run(a, stdout),
        Command::Oracle(a) => commands::oracle::run(a, stdout),
        Command::Compare(a) => commands::compare::run(a, stdout),
    }
}
