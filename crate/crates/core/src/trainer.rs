//! Double deep Q-learning: random pre-training fill, ε-greedy acting with a
//! linear anneal, a gradient step every few environment steps, periodic
//! target sync and checkpoints at episode milestones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Env, EnvError, Mission};
use crate::evalkit::{record_window, EpisodeSummary, MetricsRecord};
use crate::qnet::{
    argmax, clone_into_target, select_action, Architecture, EpisodeMemory, NetworkWeights,
    QnetError, LSTM_HIDDEN,
};
use crate::replay::{ReplayBuffer, ReplayError, SequenceSample, StackedBatch, Transition};
use crate::tensor::checkpoint::Container;
use crate::tensor::{
    clip_grad_norm, optimizer_step, AdamConfig, OptimizerState, Tape, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Qnet(#[from] QnetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Acting steps (after pre-training) over which ε falls linearly.
    pub anneal_steps: u64,
    /// Target network refresh period in acting steps.
    pub target_sync: u64,
    pub train_every: u64,
    /// Uniform-random steps stored before learning starts.
    pub prefill_steps: u64,
    /// Transitions per gradient step; the recurrent network draws
    /// `batch_size / sequence_length` windows.
    pub batch_size: usize,
    pub sequence_length: usize,
    pub replay_capacity: usize,
    pub episodes: u64,
    /// Episode counts after which a checkpoint is written.
    pub checkpoints: Vec<u64>,
    pub metrics_window: usize,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            anneal_steps: 50_000,
            target_sync: 5_000,
            train_every: 4,
            prefill_steps: 10_000,
            batch_size: 32,
            sequence_length: 4,
            replay_capacity: 50_000,
            episodes: 5_000,
            checkpoints: Vec::new(),
            metrics_window: 50,
            learning_rate: 1e-4,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        for (k, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return bad("epsilon_end exceeds epsilon_start".into());
        }
        for (k, v) in [
            ("target_sync", self.target_sync),
            ("train_every", self.train_every),
            ("episodes", self.episodes),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("sequence_length", self.sequence_length),
            ("replay_capacity", self.replay_capacity),
            ("metrics_window", self.metrics_window),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.batch_size < self.sequence_length {
            return bad("batch_size must be at least sequence_length".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!(
                "grad_clip must be non-negative, got {}",
                self.grad_clip
            ));
        }
        Ok(())
    }

    /// Windows per recurrent minibatch.
    pub fn sequence_count(&self) -> usize {
        (self.batch_size / self.sequence_length).max(1)
    }
}

/// Linear anneal from `epsilon_start` to `epsilon_end`, flat afterwards.
pub fn epsilon(step: u64, config: &TrainingConfig) -> f64 {
    if step >= config.anneal_steps {
        return config.epsilon_end;
    }
    let frac = step as f64 / config.anneal_steps as f64;
    config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac
}

fn check_gamma(gamma: f64) -> Result<f32> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(TrainError::Config(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    Ok(gamma as f32)
}

/// `y = r` for terminal rows, else `r + γ·target[argmax online]`.
/// `online` and `target` are row-major `[B, 4]`.
pub fn targets_from_q(
    online: &[f32],
    target: &[f32],
    rewards: &[f32],
    dones: &[bool],
    gamma: f32,
) -> Vec<f32> {
    let n = Action::COUNT;
    rewards
        .iter()
        .zip(dones)
        .enumerate()
        .map(|(i, (&r, &done))| {
            if done {
                r
            } else {
                let a = argmax(&online[i * n..(i + 1) * n]);
                r + gamma * target[i * n + a]
            }
        })
        .collect()
}

/// Double DQN targets for a stacked batch: the online network picks the
/// next action, the target network scores it.
pub fn double_dqn_targets(
    batch: &StackedBatch,
    online: &NetworkWeights,
    target: &NetworkWeights,
    gamma: f64,
) -> Result<Tensor> {
    let gamma = check_gamma(gamma)?;
    let qo = online.q_values_batch(&batch.next_inputs)?;
    let qt = target.q_values_batch(&batch.next_inputs)?;
    Ok(Tensor::vector(targets_from_q(
        qo.data(),
        qt.data(),
        &batch.rewards,
        &batch.dones,
        gamma,
    )))
}

/// Frames of each window as `[count, 1, R, R]` tensors, one per time step,
/// plus the final next observation: `length + 1` tensors.
fn sequence_frames(seqs: &[SequenceSample]) -> Result<Vec<Tensor>> {
    let length = seqs[0].transitions.len();
    let shape = seqs[0].transitions[0].observation.shape().to_vec();
    let mut out = Vec::with_capacity(length + 1);
    for k in 0..=length {
        let mut data = Vec::with_capacity(seqs.len() * shape.iter().product::<usize>());
        for s in seqs {
            let f = if k < length {
                &s.transitions[k].observation
            } else {
                &s.transitions[length - 1].next_observation
            };
            data.extend_from_slice(f.data());
        }
        out.push(Tensor::new(
            &[seqs.len(), shape[0], shape[1], shape[2]],
            data,
        )?);
    }
    Ok(out)
}

/// Q-values `[count, 4]` at every step of an unroll from zero state.
fn unroll(net: &NetworkWeights, frames: &[Tensor]) -> Result<Vec<Tensor>> {
    let count = frames[0].shape()[0];
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let mut h = tape.input(Tensor::zeros(&[count, LSTM_HIDDEN]));
    let mut c = tape.input(Tensor::zeros(&[count, LSTM_HIDDEN]));
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let x = tape.input(f.clone());
        let (q, h2, c2) = bound.recurrent_q(&mut tape, x, h, c)?;
        out.push(tape.value(q)?.clone());
        h = h2;
        c = c2;
    }
    Ok(out)
}

/// Double DQN targets for recurrent windows, time-major (`[k * count + b]`).
/// Both networks are unrolled from zero state over the window's frames and
/// its final next frame, so the next-state values at step `k` use the
/// recurrent state built from steps `0..=k`.
pub fn double_dqn_sequence_targets(
    seqs: &[SequenceSample],
    online: &NetworkWeights,
    target: &NetworkWeights,
    gamma: f64,
) -> Result<Tensor> {
    let gamma = check_gamma(gamma)?;
    if seqs.is_empty() {
        return Err(TrainError::Config("no sequences to score".into()));
    }
    let frames = sequence_frames(seqs)?;
    let qo = unroll(online, &frames)?;
    let qt = unroll(target, &frames)?;
    let length = seqs[0].transitions.len();
    let mut y = Vec::with_capacity(length * seqs.len());
    for k in 0..length {
        let rewards: Vec<f32> = seqs.iter().map(|s| s.transitions[k].reward).collect();
        let dones: Vec<bool> = seqs.iter().map(|s| s.transitions[k].done).collect();
        y.extend(targets_from_q(
            qo[k + 1].data(),
            qt[k + 1].data(),
            &rewards,
            &dones,
            gamma,
        ));
    }
    Ok(Tensor::vector(y))
}

/// Outcome of one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    /// Predicted Q of the taken action, one per sample.
    pub q_pred: Vec<f32>,
    pub q_targ: Vec<f32>,
    /// Global gradient norm before clipping.
    pub grad_norm: f32,
}

/// Networks, optimizer and replay memory: everything a gradient step needs.
pub struct Learner {
    config: TrainingConfig,
    online: NetworkWeights,
    target: NetworkWeights,
    optimizer: OptimizerState,
    replay: ReplayBuffer,
    sample_rng: ChaCha8Rng,
    train_steps: u64,
}

impl Learner {
    pub fn new(arch: Architecture, resolution: usize, config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let online = NetworkWeights::build(arch, resolution, config.seed)?;
        Self::from_weights(online, config)
    }

    /// Starts from given online weights; the target starts as a copy.
    pub fn from_weights(online: NetworkWeights, config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let target = online.to_target();
        let optimizer = OptimizerState::new(
            online.params(),
            AdamConfig {
                lr: config.learning_rate as f32,
                ..AdamConfig::default()
            },
        );
        let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
        sample_rng.set_stream(3);
        Ok(Self {
            config: config.clone(),
            online,
            target,
            optimizer,
            replay: ReplayBuffer::new(config.replay_capacity)?,
            sample_rng,
            train_steps: 0,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn online(&self) -> &NetworkWeights {
        &self.online
    }

    pub fn target(&self) -> &NetworkWeights {
        &self.target
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn push(&mut self, t: Transition) {
        self.replay.push(t);
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.config.lr = lr as f32;
    }

    /// θ⁻ ← θ.
    pub fn sync_target(&mut self) -> Result<()> {
        clone_into_target(&self.online, &mut self.target)?;
        Ok(())
    }

    /// One minibatch update. `None` when the replay memory cannot yet
    /// supply a batch; parameters are then untouched.
    pub fn train_step(&mut self) -> Result<Option<StepStats>> {
        let arch = self.online.architecture();
        let gamma = self.config.gamma;
        let sampled = if arch.is_recurrent() {
            self.replay
                .sample_sequences(
                    self.config.sequence_count(),
                    self.config.sequence_length,
                    &mut self.sample_rng,
                )
                .map(Sampled::Sequences)
        } else {
            self.replay
                .sample_stacked(
                    self.config.batch_size,
                    arch.input_channels(),
                    &mut self.sample_rng,
                )
                .map(Sampled::Stacked)
        };
        let sampled = match sampled {
            Ok(s) => s,
            Err(ReplayError::Empty | ReplayError::InsufficientData(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };

        let (y, grads, loss, q_pred) = match &sampled {
            Sampled::Stacked(batch) => {
                let y = double_dqn_targets(batch, &self.online, &self.target, gamma)?;
                let actions: Vec<usize> = batch.actions.iter().map(|a| a.index()).collect();
                let mut tape = Tape::new();
                let net = self.online.bind(&mut tape);
                let x = tape.input(batch.inputs.clone());
                let q = net.q(&mut tape, x)?;
                let qa = tape.gather(q, &actions)?;
                let loss = tape.squared_error(qa, &y)?;
                let grads = tape.backward(loss)?;
                let (l, p) = (tape.value(loss)?.item(), tape.value(qa)?.data().to_vec());
                (y, grads, l, p)
            }
            Sampled::Sequences(seqs) => {
                let y = double_dqn_sequence_targets(seqs, &self.online, &self.target, gamma)?;
                let frames = sequence_frames(seqs)?;
                let count = seqs.len();
                let mut tape = Tape::new();
                let net = self.online.bind(&mut tape);
                let mut h = tape.input(Tensor::zeros(&[count, LSTM_HIDDEN]));
                let mut c = tape.input(Tensor::zeros(&[count, LSTM_HIDDEN]));
                let mut picked = Vec::with_capacity(self.config.sequence_length);
                for (k, f) in frames[..self.config.sequence_length].iter().enumerate() {
                    let actions: Vec<usize> = seqs
                        .iter()
                        .map(|s| s.transitions[k].action.index())
                        .collect();
                    let x = tape.input(f.clone());
                    let (q, h2, c2) = net.recurrent_q(&mut tape, x, h, c)?;
                    picked.push(tape.gather(q, &actions)?);
                    h = h2;
                    c = c2;
                }
                let qa = tape.concat(&picked)?;
                let loss = tape.squared_error(qa, &y)?;
                let grads = tape.backward(loss)?;
                let (l, p) = (tape.value(loss)?.item(), tape.value(qa)?.data().to_vec());
                (y, grads, l, p)
            }
        };

        let params = self.online.params_mut();
        grads.accumulate_into(params)?;
        let grad_norm = if self.config.grad_clip > 0.0 {
            clip_grad_norm(params, self.config.grad_clip as f32)
        } else {
            clip_grad_norm(params, f32::INFINITY)
        };
        optimizer_step(params, &mut self.optimizer)?;
        self.train_steps += 1;
        Ok(Some(StepStats {
            loss,
            q_pred,
            q_targ: y.into_data(),
            grad_norm,
        }))
    }
}

enum Sampled {
    Stacked(StackedBatch),
    Sequences(Vec<SequenceSample>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Acting,
}

/// What happened on one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub phase: Phase,
    /// Acting steps so far (pre-training not counted).
    pub global_step: u64,
    pub epsilon: f64,
    pub trained: bool,
    pub synced: bool,
}

/// Receives run artefacts as they are produced. Every hook defaults to a
/// no-op.
pub trait RunObserver {
    fn step(&mut self, _event: &StepEvent, _learner: &Learner) {}

    fn episode(&mut self, _summary: &EpisodeSummary) -> std::io::Result<()> {
        Ok(())
    }

    fn metrics(&mut self, _record: &MetricsRecord) -> std::io::Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _episode: u64, _checkpoint: &Container) -> std::io::Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub episodes: u64,
    pub global_steps: u64,
    pub prefill_steps: u64,
    pub train_steps: u64,
    pub target_syncs: u64,
    pub records: Vec<MetricsRecord>,
    pub online: NetworkWeights,
}

/// Checkpoint container for `net` with run metadata.
pub fn checkpoint_container(
    net: &NetworkWeights,
    mission: &Mission,
    episode: u64,
    global_step: u64,
    seed: u64,
) -> Container {
    net.to_container(&[
        ("mission".into(), mission.kind.id().into()),
        ("episode".into(), episode.to_string()),
        ("global_step".into(), global_step.to_string()),
        ("seed".into(), seed.to_string()),
    ])
}

fn io_ctx(context: String) -> impl FnOnce(std::io::Error) -> TrainError {
    move |source| TrainError::Io { context, source }
}

/// Full training run. Deterministic in `config.seed`: weights, episode
/// layouts, exploration and minibatch sampling each draw from their own
/// stream.
pub fn run_training(
    mission: &Mission,
    arch: Architecture,
    config: &TrainingConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    config.validate()?;
    let env = Env::new(mission.clone())?;
    let mut learner = Learner::new(arch, mission.resolution, config)?;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(config.seed);
        r.set_stream(k);
        r
    };
    let mut env_rng = stream(1);
    let mut action_rng = stream(2);
    let mut episode_id = 0u64;

    // pre-training: uniform actions, no learning
    let mut prefill = 0u64;
    while prefill < config.prefill_steps {
        let (mut state, mut obs) = env.reset(env_rng.gen());
        while state.is_running() && prefill < config.prefill_steps {
            let action = Action::ALL[action_rng.gen_range(0..Action::COUNT)];
            let out = env.step(&state, action)?;
            learner.push(Transition {
                observation: obs.frame,
                action,
                reward: out.reward,
                next_observation: out.observation.frame.clone(),
                done: out.done,
                episode: episode_id,
                step: state.steps,
            });
            prefill += 1;
            observer.step(
                &StepEvent {
                    phase: Phase::Prefill,
                    global_step: 0,
                    epsilon: 1.0,
                    trained: false,
                    synced: false,
                },
                &learner,
            );
            state = out.state;
            obs = out.observation;
        }
        episode_id += 1;
    }

    let mut global_step = 0u64;
    let mut target_syncs = 0u64;
    let mut window: Vec<EpisodeSummary> = Vec::with_capacity(config.metrics_window);
    let (mut losses, mut q_pred, mut q_targ) = (Vec::new(), Vec::new(), Vec::new());
    let mut records = Vec::new();
    let mut memory = EpisodeMemory::new(arch);

    for episode in 1..=config.episodes {
        let (mut state, mut obs) = env.reset(env_rng.gen());
        memory.reset();
        let mut ret = 0.0f32;
        while state.is_running() {
            let eps = epsilon(global_step, config);
            let q = memory.observe(learner.online(), &obs.frame)?;
            let action = select_action(q.data(), eps, &mut action_rng)?;
            let out = env.step(&state, action)?;
            ret += out.reward;
            learner.push(Transition {
                observation: obs.frame,
                action,
                reward: out.reward,
                next_observation: out.observation.frame.clone(),
                done: out.done,
                episode: episode_id,
                step: state.steps,
            });
            global_step += 1;
            let mut event = StepEvent {
                phase: Phase::Acting,
                global_step,
                epsilon: eps,
                trained: false,
                synced: false,
            };
            if global_step.is_multiple_of(config.train_every) {
                if let Some(stats) = learner.train_step()? {
                    event.trained = true;
                    losses.push(stats.loss);
                    q_pred.extend(stats.q_pred);
                    q_targ.extend(stats.q_targ);
                }
            }
            if global_step.is_multiple_of(config.target_sync) {
                learner.sync_target()?;
                target_syncs += 1;
                event.synced = true;
            }
            observer.step(&event, &learner);
            state = out.state;
            obs = out.observation;
        }
        episode_id += 1;

        let summary = EpisodeSummary {
            episode,
            steps: state.steps,
            ret,
            status: state.status,
        };
        observer
            .episode(&summary)
            .map_err(io_ctx(format!("recording episode {episode}")))?;
        window.push(summary);
        if window.len() == config.metrics_window {
            let rec = record_window(
                episode / config.metrics_window as u64,
                &window,
                &losses,
                &q_pred,
                &q_targ,
            );
            observer
                .metrics(&rec)
                .map_err(io_ctx(format!("writing metrics at episode {episode}")))?;
            records.push(rec);
            window.clear();
            losses.clear();
            q_pred.clear();
            q_targ.clear();
        }
        if config.checkpoints.contains(&episode) {
            let c =
                checkpoint_container(learner.online(), mission, episode, global_step, config.seed);
            observer
                .checkpoint(episode, &c)
                .map_err(io_ctx(format!("writing checkpoint at episode {episode}")))?;
        }
    }

    Ok(RunResult {
        episodes: config.episodes,
        global_steps: global_step,
        prefill_steps: prefill,
        train_steps: learner.train_steps(),
        target_syncs,
        records,
        online: learner.online,
    })
}
