//! Measurement: rolling training windows, greedy checkpoint evaluation, Q
//! summaries and per-step decision traces.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    bfs_optimal_steps, gray, Action, Env, EnvError, EnvState, Mission, Observation, Status,
};
use crate::qnet::{argmax, EpisodeMemory, NetworkWeights, QnetError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoint does not fit mission: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Qnet(#[from] QnetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed trace line {line}: {message}")]
    Trace { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Written in place of steps-per-win when a window or repeat has no wins.
pub const NO_WINS: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub steps: u32,
    #[serde(rename = "return")]
    pub ret: f32,
    pub status: Status,
}

impl EpisodeSummary {
    pub fn won(&self) -> bool {
        self.status == Status::Won
    }
}

/// Distribution summary of a batch of Q-values. Quantiles interpolate
/// linearly between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    // convex combination keeps neighbouring quantiles ordered
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

impl QSummary {
    pub fn of(values: &[f32]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        Some(Self {
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            mean,
            q05: quantile(&sorted, 0.05),
            q25: quantile(&sorted, 0.25),
            q50: quantile(&sorted, 0.50),
            q75: quantile(&sorted, 0.75),
            q95: quantile(&sorted, 0.95),
        })
    }
}

/// Telemetry for one window of training episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based window index.
    pub window_id: u64,
    /// Last episode in the window.
    pub episode: u64,
    pub episodes: usize,
    pub win_frac: f64,
    /// Over winning episodes only; `None` without wins.
    pub mean_steps_win: Option<f64>,
    pub mean_return: f64,
    /// `None` when no gradient step ran during the window.
    pub mean_loss: Option<f64>,
    pub q_pred: Option<QSummary>,
    pub q_targ: Option<QSummary>,
    /// Number of predicted (and target) values summarised.
    pub q_samples: usize,
}

/// Aggregates one window. `losses` holds one value per gradient step,
/// `q_pred`/`q_targ` the predicted and target values of every sample used.
pub fn record_window(
    window_id: u64,
    episodes: &[EpisodeSummary],
    losses: &[f32],
    q_pred: &[f32],
    q_targ: &[f32],
) -> MetricsRecord {
    let n = episodes.len();
    let wins: Vec<&EpisodeSummary> = episodes.iter().filter(|e| e.won()).collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>, len: usize| {
        (len > 0).then(|| xs.sum::<f64>() / len as f64)
    };
    MetricsRecord {
        window_id,
        episode: episodes.last().map_or(0, |e| e.episode),
        episodes: n,
        win_frac: if n == 0 {
            0.0
        } else {
            wins.len() as f64 / n as f64
        },
        mean_steps_win: mean(&mut wins.iter().map(|e| e.steps as f64), wins.len()),
        mean_return: mean(&mut episodes.iter().map(|e| e.ret as f64), n).unwrap_or(0.0),
        mean_loss: mean(&mut losses.iter().map(|&l| l as f64), losses.len()),
        q_pred: QSummary::of(q_pred),
        q_targ: QSummary::of(q_targ),
        q_samples: q_pred.len(),
    }
}

/// Metrics CSV columns: the documented core first, then extended fields.
pub const METRICS_HEADER: [&str; 24] = [
    "window_id",
    "win_frac",
    "mean_steps_win",
    "mean_return",
    "mean_loss",
    "q_pred_mean",
    "q_targ_mean",
    "q_pred_q05",
    "q_pred_q25",
    "q_pred_q50",
    "q_pred_q75",
    "q_pred_q95",
    "episode",
    "episodes",
    "q_pred_min",
    "q_pred_max",
    "q_targ_min",
    "q_targ_max",
    "q_targ_q05",
    "q_targ_q25",
    "q_targ_q50",
    "q_targ_q75",
    "q_targ_q95",
    "q_samples",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NO_WINS.to_string(), |v| v.to_string())
}

impl MetricsRecord {
    /// Fields in [`METRICS_HEADER`] order; floats print in shortest
    /// round-trip form so rows parse back bit-exactly.
    pub fn csv_fields(&self) -> Vec<String> {
        let p = self.q_pred;
        let t = self.q_targ;
        let pf = |f: fn(&QSummary) -> f64| opt(p.as_ref().map(f));
        let tf = |f: fn(&QSummary) -> f64| opt(t.as_ref().map(f));
        vec![
            self.window_id.to_string(),
            self.win_frac.to_string(),
            opt(self.mean_steps_win),
            self.mean_return.to_string(),
            opt(self.mean_loss),
            pf(|s| s.mean),
            tf(|s| s.mean),
            pf(|s| s.q05),
            pf(|s| s.q25),
            pf(|s| s.q50),
            pf(|s| s.q75),
            pf(|s| s.q95),
            self.episode.to_string(),
            self.episodes.to_string(),
            pf(|s| s.min),
            pf(|s| s.max),
            tf(|s| s.min),
            tf(|s| s.max),
            tf(|s| s.q05),
            tf(|s| s.q25),
            tf(|s| s.q50),
            tf(|s| s.q75),
            tf(|s| s.q95),
            self.q_samples.to_string(),
        ]
    }
}

/// Streams metrics rows as CSV.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(METRICS_HEADER).map_err(csv_io)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.inner.write_record(rec.csv_fields()).map_err(csv_io)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> EvalError {
    EvalError::Io(std::io::Error::other(e))
}

/// Something that picks actions episode by episode.
pub trait Policy {
    fn begin_episode(&mut self);
    fn act(&mut self, env: &Env, state: &EnvState, obs: &Observation) -> Result<Action>;
}

/// ε = 0 network policy with the architecture's episode memory.
pub struct GreedyPolicy<'a> {
    net: &'a NetworkWeights,
    memory: EpisodeMemory,
    last_q: Option<Tensor>,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(net: &'a NetworkWeights) -> Self {
        Self {
            net,
            memory: EpisodeMemory::new(net.architecture()),
            last_q: None,
        }
    }

    /// Q-values behind the most recent action.
    pub fn last_q(&self) -> Option<&Tensor> {
        self.last_q.as_ref()
    }
}

impl Policy for GreedyPolicy<'_> {
    fn begin_episode(&mut self) {
        self.memory.reset();
        self.last_q = None;
    }

    fn act(&mut self, _env: &Env, _state: &EnvState, obs: &Observation) -> Result<Action> {
        let q = self.memory.observe(self.net, &obs.frame)?;
        let a = Action::ALL[argmax(q.data())];
        self.last_q = Some(q);
        Ok(a)
    }
}

/// Follows shortest paths on the latent state.
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn begin_episode(&mut self) {}

    fn act(&mut self, env: &Env, state: &EnvState, _obs: &Observation) -> Result<Action> {
        let score = |a: Action| {
            let out = env.step(state, a).expect("running state");
            match out.state.status {
                Status::Won => 0,
                Status::Running => bfs_optimal_steps(env, &out.state).map_or(u32::MAX, |d| d + 1),
                _ => u32::MAX,
            }
        };
        Ok(Action::ALL
            .into_iter()
            .min_by_key(|&a| score(a))
            .expect("four actions"))
    }
}

/// Uniformly random actions.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn begin_episode(&mut self) {}

    fn act(&mut self, _env: &Env, _state: &EnvState, _obs: &Observation) -> Result<Action> {
        Ok(Action::ALL[self.rng.gen_range(0..Action::COUNT)])
    }
}

/// Plays one episode from `seed`; returns its summary.
pub fn play_episode(
    env: &Env,
    policy: &mut dyn Policy,
    episode: u64,
    seed: u64,
) -> Result<EpisodeSummary> {
    let (mut state, mut obs) = env.reset(seed);
    policy.begin_episode();
    let mut ret = 0.0f32;
    while state.is_running() {
        let a = policy.act(env, &state, &obs)?;
        let out = env.step(&state, a)?;
        ret += out.reward;
        state = out.state;
        obs = out.observation;
    }
    Ok(EpisodeSummary {
        episode,
        steps: state.steps,
        ret,
        status: state.status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub wins: usize,
    pub win_pct: f64,
    pub mean_steps_win: Option<f64>,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub architecture: String,
    pub mission: String,
    pub episodes: usize,
    pub seed: u64,
    pub repeats: Vec<RepeatResult>,
    pub mean_win_pct: f64,
    /// Population standard deviation across repeats.
    pub std_win_pct: f64,
    /// Mean over repeats that had wins.
    pub mean_steps_win: Option<f64>,
    pub std_steps_win: Option<f64>,
}

fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, v.sqrt()))
}

/// Seed of episode `i` within a repeat seeded `repeat_seed`.
fn episode_seeds(repeat_seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(repeat_seed);
    (0..episodes).map(|_| rng.gen()).collect()
}

/// Runs `repeats` × `episodes` episodes; repeat `r` uses seed `seed + r`.
pub fn evaluate_policy(
    env: &Env,
    policy: &mut dyn Policy,
    episodes: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<RepeatResult>> {
    let mut out = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let repeat_seed = seed.wrapping_add(r as u64);
        let summaries = episode_seeds(repeat_seed, episodes)
            .into_iter()
            .enumerate()
            .map(|(i, s)| play_episode(env, policy, i as u64, s))
            .collect::<Result<Vec<_>>>()?;
        let rec = record_window(r as u64, &summaries, &[], &[], &[]);
        out.push(RepeatResult {
            repeat: r,
            seed: repeat_seed,
            wins: summaries.iter().filter(|e| e.won()).count(),
            win_pct: 100.0 * rec.win_frac,
            mean_steps_win: rec.mean_steps_win,
            mean_return: rec.mean_return,
        });
    }
    Ok(out)
}

impl EvalReport {
    pub fn from_repeats(
        checkpoint: &str,
        architecture: &str,
        mission: &str,
        episodes: usize,
        seed: u64,
        repeats: Vec<RepeatResult>,
    ) -> Self {
        let wins: Vec<f64> = repeats.iter().map(|r| r.win_pct).collect();
        let steps: Vec<f64> = repeats.iter().filter_map(|r| r.mean_steps_win).collect();
        let (mean_win_pct, std_win_pct) = mean_std(&wins).unwrap_or((0.0, 0.0));
        let steps = mean_std(&steps);
        Self {
            checkpoint: checkpoint.to_string(),
            architecture: architecture.to_string(),
            mission: mission.to_string(),
            episodes,
            seed,
            repeats,
            mean_win_pct,
            std_win_pct,
            mean_steps_win: steps.map(|s| s.0),
            std_steps_win: steps.map(|s| s.1),
        }
    }
}

fn check_fit(net: &NetworkWeights, mission: &Mission) -> Result<()> {
    if net.resolution() != mission.resolution {
        return Err(EvalError::Mismatch(format!(
            "{} network expects {r}x{r} frames, mission renders {m}x{m}",
            net.architecture(),
            r = net.resolution(),
            m = mission.resolution
        )));
    }
    Ok(())
}

/// Greedy evaluation of a network: `repeats` × `episodes`, repeat seeds
/// derived from `seed`.
pub fn evaluate(
    net: &NetworkWeights,
    mission: &Mission,
    episodes: usize,
    repeats: usize,
    seed: u64,
    checkpoint: &str,
) -> Result<EvalReport> {
    check_fit(net, mission)?;
    let env = Env::new(mission.clone())?;
    let mut policy = GreedyPolicy::new(net);
    let results = evaluate_policy(&env, &mut policy, episodes, repeats, seed)?;
    Ok(EvalReport::from_repeats(
        checkpoint,
        net.architecture().id(),
        mission.kind.id(),
        episodes,
        seed,
        results,
    ))
}

const SHADES: [(f32, char); 5] = [
    (0.0, ' '),
    (gray::FLOOR, '.'),
    (gray::WALL, '#'),
    (gray::LAVA, '~'),
    (gray::GOAL, '@'),
];

/// One character per pixel, rows joined by `/`.
pub fn frame_to_ascii(frame: &Tensor) -> String {
    let shape = frame.shape();
    let width = shape[shape.len() - 1];
    let rows: Vec<String> = frame
        .data()
        .chunks(width)
        .map(|row| {
            row.iter()
                .map(|&v| {
                    SHADES
                        .iter()
                        .find(|(g, _)| *g == v)
                        .map_or('?', |&(_, c)| c)
                })
                .collect()
        })
        .collect();
    rows.join("/")
}

/// Inverse of [`frame_to_ascii`] for frames made of the known gray levels.
pub fn ascii_to_frame(text: &str) -> Option<Tensor> {
    let rows: Vec<&str> = text.split('/').collect();
    let width = rows.first()?.chars().count();
    let mut data = Vec::with_capacity(rows.len() * width);
    for row in &rows {
        if row.chars().count() != width {
            return None;
        }
        for ch in row.chars() {
            data.push(SHADES.iter().find(|(_, c)| *c == ch)?.0);
        }
    }
    Tensor::new(&[1, rows.len(), width], data).ok()
}

/// One parsed decision-trace line.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub episode: u64,
    pub step: u32,
    pub q: [f32; 4],
    pub action: Action,
    pub frame: Tensor,
}

impl TraceEntry {
    pub fn to_line(&self) -> String {
        let q: Vec<String> = self.q.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "episode={} step={} q={} action={} frame={}",
            self.episode,
            self.step,
            q.join(","),
            self.action.id(),
            frame_to_ascii(&self.frame)
        )
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let mut fields = std::collections::HashMap::new();
        for part in line.splitn(5, ' ') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("field `{part}` has no `=`"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| format!("missing `{k}`"))
        };
        let q: Vec<f32> = get("q")?
            .split(',')
            .map(|v| v.parse::<f32>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            episode: get("episode")?
                .parse()
                .map_err(|_| "bad episode".to_string())?,
            step: get("step")?.parse().map_err(|_| "bad step".to_string())?,
            q: q.try_into()
                .map_err(|_| "expected four Q-values".to_string())?,
            action: get("action")?
                .parse()
                .map_err(|e: EnvError| e.to_string())?,
            frame: ascii_to_frame(get("frame")?).ok_or("bad frame")?,
        })
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            TraceEntry::parse(l).map_err(|message| EvalError::Trace {
                line: i + 1,
                message,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub episodes_traced: usize,
    pub lines: usize,
    pub episodes: Vec<EpisodeSummary>,
}

/// Plays `episodes` greedy episodes and writes one line per step of every
/// `every`-th episode: the newest frame, the four Q-values and the action.
pub fn dump_decisions<W: Write + ?Sized>(
    net: &NetworkWeights,
    mission: &Mission,
    episodes: usize,
    every: usize,
    seed: u64,
    out: &mut W,
) -> Result<TraceSummary> {
    check_fit(net, mission)?;
    let env = Env::new(mission.clone())?;
    let every = every.max(1);
    let mut policy = GreedyPolicy::new(net);
    let mut summary = TraceSummary {
        episodes_traced: 0,
        lines: 0,
        episodes: Vec::new(),
    };
    for (i, s) in episode_seeds(seed, episodes).into_iter().enumerate() {
        let traced = i % every == 0;
        let (mut state, mut obs) = env.reset(s);
        policy.begin_episode();
        let mut ret = 0.0f32;
        while state.is_running() {
            let a = policy.act(&env, &state, &obs)?;
            if traced {
                let q = policy.last_q().expect("q after act").data();
                let entry = TraceEntry {
                    episode: i as u64,
                    step: state.steps,
                    q: [q[0], q[1], q[2], q[3]],
                    action: a,
                    frame: obs.frame.clone(),
                };
                writeln!(out, "{}", entry.to_line())?;
                summary.lines += 1;
            }
            let next = env.step(&state, a)?;
            ret += next.reward;
            state = next.state;
            obs = next.observation;
        }
        summary.episodes_traced += traced as usize;
        summary.episodes.push(EpisodeSummary {
            episode: i as u64,
            steps: state.steps,
            ret,
            status: state.status,
        });
    }
    out.flush()?;
    Ok(summary)
}
