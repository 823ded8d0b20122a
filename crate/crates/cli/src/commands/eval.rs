use std::io::Write;

use podq::evalkit::evaluate;

use super::train::evaluate_run;
use super::{checkpoint_config, eval_error, load_checkpoint, out_err, write_file};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::EvalArgs;

pub fn run(args: EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    if let Some(dir) = &args.run {
        if args.config.config.is_some() || !args.config.overrides.is_empty() || args.out.is_some() {
            return Err(CliError::Usage(
                "--run evaluates with the run's own config; --config, --override and --out do not apply"
                    .into(),
            ));
        }
        let mut manifest = RunManifest::load(dir)?;
        let config = manifest.run_config(dir)?;
        let e = &config.eval;
        let n = evaluate_run(
            dir,
            &config,
            args.episodes.unwrap_or(e.episodes),
            args.repeats.unwrap_or(e.repeats),
            args.seed.unwrap_or(e.seed),
            &mut manifest,
            stdout,
        )?;
        if n == 0 {
            return Err(CliError::Data(format!(
                "run {} has no checkpoints",
                dir.display()
            )));
        }
        return manifest.save(dir);
    }

    let path = args
        .checkpoint
        .as_ref()
        .expect("clap requires a checkpoint");
    let ck = load_checkpoint(path)?;
    let config = checkpoint_config(&args.config, &ck)?;
    let episodes = args.episodes.unwrap_or(config.eval.episodes);
    let repeats = args.repeats.unwrap_or(config.eval.repeats);
    if episodes == 0 || repeats == 0 {
        return Err(CliError::Usage(
            "--episodes and --repeats must be positive".into(),
        ));
    }
    let name = path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    let report = evaluate(
        &ck.net,
        &config.mission,
        episodes,
        repeats,
        args.seed.unwrap_or(config.eval.seed),
        &name,
    )
    .map_err(|e| eval_error(&format!("evaluating {}", path.display()), e))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(out) = &args.out {
        write_file(out, json.as_bytes())?;
    }
    stdout.write_all(json.as_bytes()).map_err(out_err)
}
