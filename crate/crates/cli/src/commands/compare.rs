use std::io::Write;

use podq::evalkit::{EvalReport, NO_WINS};

use super::train::report_path;
use super::{checkpoint_name, out_err, write_file};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::CompareArgs;

fn fmt(v: Option<f64>) -> String {
    v.map_or(NO_WINS.to_string(), |v| format!("{v:.2}"))
}

/// One header plus one row per run: `variant`, then win % and steps per
/// win for each checkpoint of the first run.
pub fn table(runs: &[std::path::PathBuf]) -> Result<String> {
    let first = RunManifest::load(&runs[0])?.run_config(&runs[0])?;
    let checkpoints: Vec<u64> = first
        .training
        .checkpoints
        .iter()
        .copied()
        .filter(|&c| c <= first.training.episodes)
        .collect();
    if checkpoints.is_empty() {
        return Err(CliError::Data(format!(
            "run {} has no checkpoints to compare",
            runs[0].display()
        )));
    }
    let mut out = String::from("variant");
    for &c in &checkpoints {
        let n = checkpoint_name(c);
        out.push_str(&format!(",{n}_win_pct,{n}_steps_per_win"));
    }
    out.push('\n');
    for dir in runs {
        let config = RunManifest::load(dir)?.run_config(dir)?;
        out.push_str(config.architecture.id());
        for &c in &checkpoints {
            let path = report_path(dir, c);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                CliError::Data(format!(
                    "run {}: missing evaluation report {} ({e}); run `podq eval --run {}`",
                    dir.display(),
                    path.display(),
                    dir.display()
                ))
            })?;
            let report: EvalReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("report {}: {e}", path.display())))?;
            out.push_str(&format!(
                ",{},{}",
                fmt(Some(report.mean_win_pct)),
                fmt(report.mean_steps_win)
            ));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn run(args: CompareArgs, stdout: &mut dyn Write) -> Result<()> {
    let csv = table(&args.runs)?;
    if let Some(out) = &args.out {
        write_file(out, csv.as_bytes())?;
    }
    stdout.write_all(csv.as_bytes()).map_err(out_err)
}
