use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use podq::env::Status;
use podq::evalkit::{evaluate, EpisodeSummary, MetricsRecord, MetricsWriter};
use podq::tensor::checkpoint::Container;
use podq::trainer::{run_training, RunObserver};
use toml::Value;

use super::{checkpoint_name, eval_error, load_checkpoint, out_err, train_error, write_file};
use crate::config::{self, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{config_diff, unix_now, RunManifest, RunStatus};
use crate::{TrainArgs, RUNS_DIR_VAR};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub fn checkpoint_path(dir: &Path, episode: u64) -> PathBuf {
    dir.join("checkpoints")
        .join(format!("{}.podq", checkpoint_name(episode)))
}

pub fn report_path(dir: &Path, episode: u64) -> PathBuf {
    dir.join("eval")
        .join(format!("{}.json", checkpoint_name(episode)))
}

fn status_id(s: Status) -> &'static str {
    match s {
        Status::Running => "running",
        Status::Won => "won",
        Status::Died => "died",
        Status::TimedOut => "timed-out",
    }
}

struct RunWriter<'a> {
    dir: &'a Path,
    metrics: MetricsWriter<BufWriter<File>>,
    episodes: BufWriter<File>,
    checkpoints: Vec<u64>,
    quiet: bool,
}

impl RunObserver for RunWriter<'_> {
    fn episode(&mut self, s: &EpisodeSummary) -> std::io::Result<()> {
        writeln!(
            self.episodes,
            "{},{},{:?},{}",
            s.episode,
            s.steps,
            s.ret,
            status_id(s.status)
        )
    }

    fn metrics(&mut self, r: &MetricsRecord) -> std::io::Result<()> {
        self.metrics.write(r).map_err(std::io::Error::other)?;
        self.episodes.flush()?;
        if !self.quiet {
            let steps = r
                .mean_steps_win
                .map_or("NA".to_string(), |s| format!("{s:.1}"));
            let loss = r.mean_loss.map_or("NA".to_string(), |l| format!("{l:.4}"));
            eprintln!(
                "episode {:>6}  win {:>5.1}%  steps/win {:>5}  return {:>7.3}  loss {}",
                r.episode,
                100.0 * r.win_frac,
                steps,
                r.mean_return,
                loss
            );
        }
        Ok(())
    }

    fn checkpoint(&mut self, episode: u64, c: &Container) -> std::io::Result<()> {
        let path = checkpoint_path(self.dir, episode);
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        let mut out = BufWriter::new(File::create(&path)?);
        c.write_to(&mut out).map_err(std::io::Error::other)?;
        out.flush()?;
        self.checkpoints.push(episode);
        Ok(())
    }
}

fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let (table, mut overrides) = args.config.layers()?;
    let mut sugar = Vec::new();
    if let Some(a) = &args.arch {
        sugar.push(("architecture".to_string(), Value::String(a.clone())));
    }
    if let Some(p) = &args.profile {
        sugar.push(("profile".to_string(), Value::String(p.clone())));
    }
    if let Some(n) = args.episodes {
        sugar.push(("training.episodes".to_string(), Value::Integer(n as i64)));
    }
    if let Some(s) = args.seed {
        sugar.push(("training.seed".to_string(), Value::Integer(s as i64)));
    }
    // explicit --override wins over the shorthands
    sugar.append(&mut overrides);
    config::resolve(table, &sugar)
}

fn run_dir(args: &TrainArgs, c: &RunConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(RUNS_DIR_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!(
            "{}-{}-s{}",
            c.mission.kind.id(),
            c.architecture.id(),
            c.training.seed
        ))
    })
}

/// Writes `eval/ep-NNNNNN.json` for every checkpoint present in `dir`.
pub fn evaluate_run(
    dir: &Path,
    config: &RunConfig,
    episodes: usize,
    repeats: usize,
    seed: u64,
    manifest: &mut RunManifest,
    stdout: &mut dyn Write,
) -> Result<usize> {
    let mut done = 0;
    for &ep in &config.training.checkpoints {
        let path = checkpoint_path(dir, ep);
        if !path.exists() {
            continue;
        }
        let ck = load_checkpoint(&path)?;
        let name = checkpoint_name(ep);
        let report = evaluate(&ck.net, &config.mission, episodes, repeats, seed, &name)
            .map_err(|e| eval_error(&format!("evaluating {}", path.display()), e))?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        let out = report_path(dir, ep);
        write_file(&out, format!("{json}\n").as_bytes())?;
        manifest.add_output(out.strip_prefix(dir).unwrap_or(&out));
        writeln!(
            stdout,
            "{}",
            serde_json::to_string(&report).expect("report serializes")
        )
        .map_err(out_err)?;
        done += 1;
    }
    Ok(done)
}

pub fn run(args: TrainArgs, command: Vec<String>, stdout: &mut dyn Write) -> Result<()> {
    let config = resolve_config(&args)?;
    let dir = run_dir(&args, &config);
    let manifest_path = RunManifest::path(&dir);
    if manifest_path.exists() {
        if !args.resume {
            return Err(CliError::Usage(format!(
                "run directory {} already holds a manifest; pass --resume or choose another --out",
                dir.display()
            )));
        }
        let previous = RunManifest::load(&dir)?;
        let diff = config_diff(&previous.run_config(&dir)?, &config);
        if !diff.is_empty() {
            return Err(CliError::Usage(format!(
                "cannot resume {}: config differs at {}",
                dir.display(),
                diff.join(", ")
            )));
        }
        if previous.status == RunStatus::Complete {
            writeln!(stdout, "{} is already complete", dir.display()).map_err(out_err)?;
            return Ok(());
        }
        // Runs are deterministic in their config, so an interrupted run is
        // redone from the start and reproduces the same artefacts.
    }

    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, "creating run directory", e))?;
    let mut manifest = RunManifest::new(command, &config);
    manifest.save(&dir)?;
    write_file(&dir.join(CONFIG_FILE), config.to_text().as_bytes())?;
    manifest.add_output(CONFIG_FILE);

    let open = |name: &str| {
        let p = dir.join(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| CliError::io(&p, "creating", e))
    };
    let mut episodes = open(EPISODES_FILE)?;
    writeln!(episodes, "episode,steps,return,status").map_err(out_err)?;
    let metrics = MetricsWriter::new(open(METRICS_FILE)?).map_err(|e| {
        CliError::Runtime(format!("writing {}: {e}", dir.join(METRICS_FILE).display()))
    })?;
    let mut writer = RunWriter {
        dir: &dir,
        metrics,
        episodes,
        checkpoints: Vec::new(),
        quiet: args.quiet,
    };
    let result = run_training(
        &config.mission,
        config.architecture,
        &config.training,
        &mut writer,
    )
    .map_err(|e| train_error(&format!("run {}", dir.display()), e))?;
    writer.episodes.flush().map_err(out_err)?;
    manifest.add_output(METRICS_FILE);
    manifest.add_output(EPISODES_FILE);
    for &ep in &writer.checkpoints {
        let p = checkpoint_path(&dir, ep);
        manifest.add_output(p.strip_prefix(&dir).unwrap_or(&p));
    }
    manifest.save(&dir)?;

    if config.eval.after_training {
        let e = &config.eval;
        evaluate_run(
            &dir,
            &config,
            e.episodes,
            e.repeats,
            e.seed,
            &mut manifest,
            &mut std::io::sink(),
        )?;
    }
    manifest.status = RunStatus::Complete;
    manifest.finished_unix = Some(unix_now());
    manifest.save(&dir)?;
    writeln!(
        stdout,
        "{}: {} episodes, {} acting steps, {} gradient steps, {} checkpoints",
        dir.display(),
        result.episodes,
        result.global_steps,
        result.train_steps,
        writer.checkpoints.len()
    )
    .map_err(out_err)?;
    Ok(())
}
