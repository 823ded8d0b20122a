use std::fs::OpenOptions;
use std::io::{BufWriter, Write};

use podq::evalkit::dump_decisions;

use super::{checkpoint_config, eval_error, load_checkpoint, out_err};
use crate::error::{CliError, Result};
use crate::InspectArgs;

pub fn run(args: InspectArgs, stdout: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let config = checkpoint_config(&args.config, &ck)?;
    let context = format!("inspecting {}", args.checkpoint.display());
    let summary = match &args.out {
        Some(path) => {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| CliError::io(path, "opening trace", e))?;
            let mut out = BufWriter::new(file);
            dump_decisions(
                &ck.net,
                &config.mission,
                args.episodes,
                args.every,
                args.seed,
                &mut out,
            )
            .map_err(|e| eval_error(&context, e))?
        }
        None => dump_decisions(
            &ck.net,
            &config.mission,
            args.episodes,
            args.every,
            args.seed,
            stdout,
        )
        .map_err(|e| eval_error(&context, e))?,
    };
    let wins = summary.episodes.iter().filter(|e| e.won()).count();
    eprintln!(
        "traced {} of {} episodes ({} lines); {} won",
        summary.episodes_traced,
        summary.episodes.len(),
        summary.lines,
        wins
    );
    stdout.flush().map_err(out_err)
}
