use std::fmt::Write as _;
use std::io::Write;

use podq::env::{
    bfs_optimal_steps, memoryless_ceiling, tabular_q_solve, Env, Status, TabularConfig,
};

use super::{out_err, write_file};
use crate::config;
use crate::error::{CliError, Result};
use crate::OracleArgs;

/// Exhaustive memoryless search is only attempted below this many frames.
const CEILING_FRAMES: usize = 8;

pub fn run(args: OracleArgs, stdout: &mut dyn Write) -> Result<()> {
    let (table, overrides) = args.config.layers()?;
    let config = config::resolve(table, &overrides)?;
    let mission = &config.mission;
    let env = Env::new(mission.clone())
        .map_err(|e| CliError::Usage(format!("config section `mission`: {e}")))?;
    let q = tabular_q_solve(
        &env,
        &TabularConfig::new(0.1, 0.99, args.episodes, args.seed),
    )
    .map_err(|e| CliError::Usage(format!("tabular solver: {e}")))?;

    let mut report = String::new();
    let w = &mut report;
    writeln!(
        w,
        "mission {} ({}x{}, max {} steps)",
        mission.kind.id(),
        mission.width,
        mission.height,
        mission.max_steps
    )
    .ok();
    writeln!(
        w,
        "{:<10} {:<8} {:<10} {:>4} {:>8} {:>8}",
        "agent", "heading", "goal", "bfs", "tabular", "result"
    )
    .ok();
    let starts = env.initial_states();
    let mut wins = 0;
    let mut optimal = 0;
    let mut optima = Vec::new();
    for s in &starts {
        let bfs = bfs_optimal_steps(&env, s);
        let (end, _) = q.rollout(&env, *s);
        let won = end.status == Status::Won;
        wins += won as usize;
        optimal += (won && Some(end.steps) == bfs) as usize;
        if let Some(b) = bfs {
            optima.push(b);
        }
        writeln!(
            w,
            "{:<10} {:<8} {:<10} {:>4} {:>8} {:>8}",
            format!("({},{})", s.agent.0, s.agent.1),
            format!("{:?}", s.heading).to_lowercase(),
            format!("({},{})", s.goal.0, s.goal.1),
            bfs.map_or("-".to_string(), |b| b.to_string()),
            end.steps,
            format!("{:?}", end.status).to_lowercase()
        )
        .ok();
    }
    optima.sort_unstable();
    optima.dedup();
    let n = starts.len().max(1) as f64;
    writeln!(w, "spawns {}", starts.len()).ok();
    writeln!(w, "distinct bfs optima {:?}", optima).ok();
    writeln!(w, "tabular greedy win rate {:.1}%", 100.0 * wins as f64 / n).ok();
    writeln!(
        w,
        "tabular greedy optimal on {optimal} of {} spawns",
        starts.len()
    )
    .ok();
    match memoryless_ceiling(&env, CEILING_FRAMES) {
        Some(c) => writeln!(w, "memoryless ceiling {:.1}%", 100.0 * c).ok(),
        None => writeln!(
            w,
            "memoryless ceiling not computed (more than {CEILING_FRAMES} distinct frames)"
        )
        .ok(),
    };

    if let Some(out) = &args.out {
        write_file(out, report.as_bytes())?;
    }
    stdout.write_all(report.as_bytes()).map_err(out_err)
}
