//! The three Q-network variants. All share the convolutional trunk
//! (6x6x32 → 6x6x36 → 4x4x64, strides 2/2/1, ReLU after each), a
//! 512-unit ReLU layer and a linear 4-way output. The recurrent variant
//! inserts a 256-unit LSTM between the flattened trunk and the 512 layer.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Action;
use crate::tensor::checkpoint::{CheckpointError, Container};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const LSTM_HIDDEN: usize = 256;
pub const DENSE_UNITS: usize = 512;
pub const STACK_DEPTH: usize = 4;

/// (out channels, kernel size, stride) for the trunk.
const TRUNK: [(usize, usize, usize); 3] = [(32, 6, 2), (36, 6, 2), (64, 4, 1)];

#[derive(Debug, Error)]
pub enum QnetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, QnetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SimpleDqn,
    StackedDqn,
    Drqn,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::SimpleDqn,
        Architecture::StackedDqn,
        Architecture::Drqn,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::SimpleDqn => "simple-dqn",
            Architecture::StackedDqn => "stacked-dqn",
            Architecture::Drqn => "drqn",
        }
    }

    /// Frames per network input.
    pub fn input_channels(self) -> usize {
        match self {
            Architecture::StackedDqn => STACK_DEPTH,
            _ => 1,
        }
    }

    pub fn is_recurrent(self) -> bool {
        self == Architecture::Drqn
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = QnetError;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| QnetError::Usage(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Online,
    Target,
}

/// Side length of the trunk's final feature map for a square input.
pub fn trunk_output_side(resolution: usize) -> Option<usize> {
    let mut side = resolution;
    for (_, k, s) in TRUNK {
        if side < k {
            return None;
        }
        side = (side - k) / s + 1;
    }
    Some(side)
}

/// Flattened trunk feature count for a square input.
pub fn trunk_features(resolution: usize) -> Option<usize> {
    trunk_output_side(resolution).map(|s| s * s * TRUNK[2].0)
}

/// LSTM (h, c) carried across the steps of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Tensor,
    pub c: Tensor,
}

impl RecurrentState {
    pub fn zeros() -> Self {
        Self {
            h: Tensor::zeros(&[LSTM_HIDDEN]),
            c: Tensor::zeros(&[LSTM_HIDDEN]),
        }
    }
}

/// Ordered named parameters for one architecture at one input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    arch: Architecture,
    resolution: usize,
    pub role: Role,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl NetworkWeights {
    /// Freshly initialised online weights, deterministic in `seed`.
    ///
    /// Conv and dense layers use He-uniform weights with zero bias. The LSTM
    /// uses U(±1/√256) weights, zero bias except 1.0 on the forget gate.
    pub fn build(arch: Architecture, resolution: usize, seed: u64) -> Result<Self> {
        let features = trunk_features(resolution).ok_or_else(|| {
            QnetError::Usage(format!(
                "resolution {resolution} is too small for the convolutional trunk"
            ))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: &str, t: Tensor| {
            names.push(name.to_string());
            params.push(t);
        };
        let mut in_ch = arch.input_channels();
        for (i, (out_ch, k, _)) in TRUNK.into_iter().enumerate() {
            let fan_in = in_ch * k * k;
            push(
                &format!("conv{}.weight", i + 1),
                he_uniform(&mut rng, &[out_ch, in_ch, k, k], fan_in),
            );
            push(&format!("conv{}.bias", i + 1), Tensor::zeros(&[out_ch]));
            in_ch = out_ch;
        }
        let mut dense_in = features;
        if arch.is_recurrent() {
            let bound = 1.0 / (LSTM_HIDDEN as f32).sqrt();
            push(
                "lstm.wx",
                uniform(&mut rng, &[4 * LSTM_HIDDEN, features], bound),
            );
            push(
                "lstm.wh",
                uniform(&mut rng, &[4 * LSTM_HIDDEN, LSTM_HIDDEN], bound),
            );
            let mut bias = vec![0.0; 4 * LSTM_HIDDEN];
            bias[LSTM_HIDDEN..2 * LSTM_HIDDEN].fill(1.0);
            push("lstm.bias", Tensor::vector(bias));
            dense_in = LSTM_HIDDEN;
        }
        push(
            "fc.weight",
            he_uniform(&mut rng, &[DENSE_UNITS, dense_in], dense_in),
        );
        push("fc.bias", Tensor::zeros(&[DENSE_UNITS]));
        push(
            "out.weight",
            he_uniform(&mut rng, &[Action::COUNT, DENSE_UNITS], DENSE_UNITS),
        );
        push("out.bias", Tensor::zeros(&[Action::COUNT]));
        Ok(Self {
            arch,
            resolution,
            role: Role::Online,
            names,
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// `(name, shape)` pairs in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// FNV-1a over the raw bits of every parameter value.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for t in &self.params {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        hash
    }

    /// Copy of these weights tagged as a target network.
    pub fn to_target(&self) -> Self {
        let mut t = self.clone();
        t.role = Role::Target;
        for p in &mut t.params {
            p.clear_grad();
        }
        t
    }

    /// Expected per-step input shape `[C, R, R]`.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.arch.input_channels(), self.resolution, self.resolution]
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'w>(&'w self, tape: &mut Tape<'w>) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p))
            .collect();
        Bound {
            arch: self.arch,
            vars,
        }
    }

    pub fn to_container(&self, extra_meta: &[(String, String)]) -> Container {
        let mut meta = vec![
            ("arch".to_string(), self.arch.id().to_string()),
            ("resolution".to_string(), self.resolution.to_string()),
        ];
        meta.extend_from_slice(extra_meta);
        Container {
            meta,
            tensors: self
                .names
                .iter()
                .cloned()
                .zip(self.params.iter().map(|p| {
                    let mut p = p.clone();
                    p.clear_grad();
                    p
                }))
                .collect(),
        }
    }

    /// Rebuilds weights from a checkpoint container, validating the manifest
    /// against a freshly built network of the same architecture.
    pub fn from_container(c: &Container) -> Result<Self> {
        let arch: Architecture = c.require_meta("arch")?.parse()?;
        let resolution: usize = c
            .require_meta("resolution")?
            .parse()
            .map_err(|_| CheckpointError::Format("resolution is not an integer".into()))?;
        let mut w = Self::build(arch, resolution, 0)?;
        let expected = w.manifest();
        let got: Vec<(String, Vec<usize>)> = c
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if expected != got {
            return Err(QnetError::Manifest(format!(
                "checkpoint tensors do not match a {arch} network at resolution {resolution}"
            )));
        }
        for (p, (_, t)) in w.params.iter_mut().zip(&c.tensors) {
            p.copy_from(t)?;
        }
        Ok(w)
    }

    /// Q-values for one step. `input` is `[C, R, R]`; `recurrent` must be
    /// given exactly when the architecture is recurrent.
    pub fn q_values(
        &self,
        input: &Tensor,
        recurrent: Option<&RecurrentState>,
    ) -> Result<(Tensor, Option<RecurrentState>)> {
        match (self.arch.is_recurrent(), recurrent) {
            (false, Some(_)) => {
                return Err(QnetError::Usage(format!(
                    "{} takes no recurrent state",
                    self.arch
                )))
            }
            (true, None) => {
                return Err(QnetError::Usage(
                    "drqn needs a recurrent state (use RecurrentState::zeros at episode start)"
                        .into(),
                ))
            }
            _ => {}
        }
        if input.shape() != self.input_shape() {
            return Err(QnetError::Usage(format!(
                "{} expects input {:?}, got {:?}",
                self.arch,
                self.input_shape(),
                input.shape()
            )));
        }
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let x = tape.input(input.clone());
        match recurrent {
            None => {
                let q = net.q(&mut tape, x)?;
                Ok((tape.value(q)?.clone(), None))
            }
            Some(state) => {
                let h = tape.input(state.h.clone());
                let c = tape.input(state.c.clone());
                let (q, h, c) = net.recurrent_q(&mut tape, x, h, c)?;
                Ok((
                    tape.value(q)?.clone(),
                    Some(RecurrentState {
                        h: tape.value(h)?.clone(),
                        c: tape.value(c)?.clone(),
                    }),
                ))
            }
        }
    }

    /// Batched Q-values for a non-recurrent network: `[B, C, R, R]` → `[B, 4]`.
    pub fn q_values_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        if self.arch.is_recurrent() {
            return Err(QnetError::Usage(
                "use a sequence forward for the recurrent network".into(),
            ));
        }
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let x = tape.input(inputs.clone());
        let q = net.q(&mut tape, x)?;
        Ok(tape.value(q)?.clone())
    }

    /// Flattened trunk features for one `[C, R, R]` input.
    pub fn trunk_features(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let x = tape.input(input.clone());
        let f = net.features(&mut tape, x)?;
        Ok(tape.value(f)?.clone())
    }
}

/// Overwrites `target`'s parameters with `online`'s.
pub fn clone_into_target(online: &NetworkWeights, target: &mut NetworkWeights) -> Result<()> {
    if online.arch != target.arch || online.manifest() != target.manifest() {
        return Err(QnetError::Manifest(format!(
            "cannot copy {} weights into {} weights",
            online.arch, target.arch
        )));
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        t.copy_from(o)?;
    }
    target.resolution = online.resolution;
    Ok(())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy choice over the four Q-values.
pub fn select_action<R: Rng + ?Sized>(q: &[f32], epsilon: f64, rng: &mut R) -> Result<Action> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(QnetError::Usage(format!(
            "epsilon must lie in [0, 1], got {epsilon}"
        )));
    }
    if q.len() != Action::COUNT {
        return Err(QnetError::Usage(format!(
            "expected {} Q-values, got {}",
            Action::COUNT,
            q.len()
        )));
    }
    // Always draw the explore coin so the stream advances identically.
    let explore = rng.gen::<f64>() < epsilon;
    let index = if explore {
        rng.gen_range(0..Action::COUNT)
    } else {
        argmax(q)
    };
    Ok(Action::ALL[index])
}

/// Network parameters registered on a tape.
pub struct Bound {
    arch: Architecture,
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Conv trunk, flattened row-major per sample.
    pub fn features(&self, tape: &mut Tape<'_>, frames: Var) -> Result<Var> {
        let mut x = frames;
        for (i, (_, _, stride)) in TRUNK.into_iter().enumerate() {
            x = tape.conv2d(x, self.vars[2 * i], self.vars[2 * i + 1], stride)?;
            x = tape.relu(x)?;
        }
        let batched = tape.value(x)?.rank() == 4;
        Ok(if batched {
            tape.flatten_batch(x)?
        } else {
            tape.flatten(x)?
        })
    }

    fn head_offset(&self) -> usize {
        if self.arch.is_recurrent() {
            9
        } else {
            6
        }
    }

    /// Dense 512 + ReLU, then the linear output layer.
    pub fn head(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let o = self.head_offset();
        let hidden = tape.dense(x, self.vars[o], self.vars[o + 1])?;
        let hidden = tape.relu(hidden)?;
        Ok(tape.dense(hidden, self.vars[o + 2], self.vars[o + 3])?)
    }

    /// Non-recurrent Q-values for `[C,R,R]` or `[B,C,R,R]` frames.
    pub fn q(&self, tape: &mut Tape<'_>, frames: Var) -> Result<Var> {
        if self.arch.is_recurrent() {
            return Err(QnetError::Usage("drqn needs a recurrent state".into()));
        }
        let f = self.features(tape, frames)?;
        self.head(tape, f)
    }

    /// One recurrent step: returns `(q, h, c)`.
    pub fn recurrent_q(
        &self,
        tape: &mut Tape<'_>,
        frames: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var, Var)> {
        if !self.arch.is_recurrent() {
            return Err(QnetError::Usage(format!(
                "{} takes no recurrent state",
                self.arch
            )));
        }
        let f = self.features(tape, frames)?;
        let (h, c) = tape.lstm_step(f, h, c, self.vars[6], self.vars[7], self.vars[8])?;
        let q = self.head(tape, h)?;
        Ok((q, h, c))
    }
}

/// Per-episode input state of an acting agent: the recent frames for a
/// stacked input, or the LSTM state for the recurrent network. The stack
/// matches what replay sampling builds (oldest first, zeros before the
/// episode starts).
#[derive(Debug, Clone)]
pub struct EpisodeMemory {
    arch: Architecture,
    frames: std::collections::VecDeque<Tensor>,
    recurrent: Option<RecurrentState>,
}

impl EpisodeMemory {
    pub fn new(arch: Architecture) -> Self {
        Self {
            arch,
            frames: std::collections::VecDeque::new(),
            recurrent: arch.is_recurrent().then(RecurrentState::zeros),
        }
    }

    /// Forgets the episode; the LSTM state goes back to zeros.
    pub fn reset(&mut self) {
        self.frames.clear();
        if self.arch.is_recurrent() {
            self.recurrent = Some(RecurrentState::zeros());
        }
    }

    pub fn recurrent(&self) -> Option<&RecurrentState> {
        self.recurrent.as_ref()
    }

    /// Network input ending at the most recent frame.
    pub fn input(&self) -> Result<Tensor> {
        let last = self
            .frames
            .back()
            .ok_or_else(|| QnetError::Usage("no frame observed yet".into()))?;
        let depth = self.arch.input_channels();
        if depth == 1 {
            return Ok(last.clone());
        }
        let shape = last.shape();
        let frame_len = last.numel();
        let mut data = vec![0.0; (depth - self.frames.len()) * frame_len];
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        Ok(Tensor::new(&[depth, shape[1], shape[2]], data)?)
    }

    /// Records `frame` (`[1, R, R]`) and returns the Q-values for it,
    /// advancing the LSTM state when there is one.
    pub fn observe(&mut self, net: &NetworkWeights, frame: &Tensor) -> Result<Tensor> {
        if net.architecture() != self.arch {
            return Err(QnetError::Usage(format!(
                "memory built for {} used with {}",
                self.arch,
                net.architecture()
            )));
        }
        if self.frames.len() == self.arch.input_channels() {
            self.frames.pop_front();
        }
        self.frames.push_back(frame.clone());
        let input = self.input()?;
        let (q, next) = net.q_values(&input, self.recurrent.as_ref())?;
        if next.is_some() {
            self.recurrent = next;
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_frame(rng: &mut ChaCha8Rng, channels: usize) -> Tensor {
        Tensor::new(
            &[channels, 32, 32],
            (0..channels * 1024).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        for arch in Architecture::ALL {
            let a = NetworkWeights::build(arch, 32, 7).unwrap();
            let b = NetworkWeights::build(arch, 32, 7).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.checksum(), b.checksum());
            assert_ne!(
                a.checksum(),
                NetworkWeights::build(arch, 32, 8).unwrap().checksum()
            );
        }
    }

    #[test]
    fn simple_and_stacked_differ_only_in_first_conv() {
        let s = NetworkWeights::build(Architecture::SimpleDqn, 32, 0)
            .unwrap()
            .manifest();
        let k = NetworkWeights::build(Architecture::StackedDqn, 32, 0)
            .unwrap()
            .manifest();
        assert_eq!(s.len(), k.len());
        for (a, b) in s.iter().zip(&k) {
            if a.0 == "conv1.weight" {
                assert_eq!(a.1, vec![32, 1, 6, 6]);
                assert_eq!(b.1, vec![32, 4, 6, 6]);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn drqn_has_one_lstm_block_of_256() {
        let m = NetworkWeights::build(Architecture::Drqn, 32, 0)
            .unwrap()
            .manifest();
        let lstm: Vec<_> = m.iter().filter(|(n, _)| n.starts_with("lstm.")).collect();
        assert_eq!(lstm.len(), 3);
        assert_eq!(lstm[0].1, vec![4 * 256, 256]);
        assert_eq!(lstm[1].1, vec![4 * 256, 256]);
        assert_eq!(lstm[2].1, vec![4 * 256]);
        let fc = m.iter().find(|(n, _)| n == "fc.weight").unwrap();
        assert_eq!(fc.1, vec![512, 256]);
    }

    #[test]
    fn trunk_geometry() {
        assert_eq!(trunk_output_side(32), Some(2));
        assert_eq!(trunk_features(32), Some(256));
        assert_eq!(trunk_output_side(28), Some(1));
        assert_eq!(trunk_output_side(27), None);
        assert!(NetworkWeights::build(Architecture::SimpleDqn, 20, 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for arch in Architecture::ALL {
            let mut w = NetworkWeights::build(arch, 32, 3).unwrap();
            for p in w.params_mut() {
                p.data_mut().fill(0.0);
            }
            let x = random_frame(&mut rng, arch.input_channels());
            let state = RecurrentState::zeros();
            let rec = arch.is_recurrent().then_some(&state);
            let (q, _) = w.q_values(&x, rec).unwrap();
            assert_eq!(q.data(), &[0.0; 4]);
        }
    }

    #[test]
    fn recurrent_state_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_frame(&mut rng, 1);
        let simple = NetworkWeights::build(Architecture::SimpleDqn, 32, 0).unwrap();
        assert!(matches!(
            simple.q_values(&x, Some(&RecurrentState::zeros())),
            Err(QnetError::Usage(_))
        ));
        let drqn = NetworkWeights::build(Architecture::Drqn, 32, 0).unwrap();
        assert!(matches!(drqn.q_values(&x, None), Err(QnetError::Usage(_))));
    }

    #[test]
    fn drqn_state_carries_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = NetworkWeights::build(Architecture::Drqn, 32, 5).unwrap();
        let x = random_frame(&mut rng, 1);
        let (q0, s1) = w.q_values(&x, Some(&RecurrentState::zeros())).unwrap();
        let (q1, s2) = w.q_values(&x, s1.as_ref()).unwrap();
        assert_ne!(q0, q1);
        let s2 = s2.unwrap();
        assert!(s2.h.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn stacked_frames_are_not_pooled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = NetworkWeights::build(Architecture::StackedDqn, 32, 9).unwrap();
        let x = random_frame(&mut rng, 4);
        let mut swapped = x.clone();
        let (a, b) = swapped.data_mut().split_at_mut(1024);
        a.swap_with_slice(&mut b[..1024]);
        let (q, _) = w.q_values(&x, None).unwrap();
        let (qs, _) = w.q_values(&swapped, None).unwrap();
        assert_ne!(q, qs);
    }

    #[test]
    fn select_action_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            select_action(&[0.1, 0.9, 0.3, 0.2], 0.0, &mut rng).unwrap(),
            Action::Backward
        );
        assert_eq!(
            select_action(&[5.0, 5.0, 1.0, 1.0], 0.0, &mut rng).unwrap(),
            Action::Forward
        );
        assert!(select_action(&[0.0; 4], 1.5, &mut rng).is_err());
        assert!(select_action(&[0.0; 4], -0.1, &mut rng).is_err());
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_action(&[9.0, 0.0, 0.0, 0.0], 1.0, &mut rng)
                .unwrap()
                .index()] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!(
                (c as f64 - n as f64 * 0.25).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn target_clone_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let online = NetworkWeights::build(Architecture::SimpleDqn, 32, 1).unwrap();
        let mut target = NetworkWeights::build(Architecture::SimpleDqn, 32, 2)
            .unwrap()
            .to_target();
        clone_into_target(&online, &mut target).unwrap();
        let x = random_frame(&mut rng, 1);
        assert_eq!(
            online.q_values(&x, None).unwrap().0,
            target.q_values(&x, None).unwrap().0
        );
        let before = target.checksum();
        clone_into_target(&online, &mut target).unwrap();
        assert_eq!(target.checksum(), before);
        let mut drqn = NetworkWeights::build(Architecture::Drqn, 32, 2).unwrap();
        assert!(matches!(
            clone_into_target(&online, &mut drqn),
            Err(QnetError::Manifest(_))
        ));
    }

    #[test]
    fn output_bias_shift_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = NetworkWeights::build(Architecture::SimpleDqn, 32, 11).unwrap();
        for _ in 0..10 {
            let x = random_frame(&mut rng, 1);
            let (q, _) = w.q_values(&x, None).unwrap();
            let shift = rng.gen_range(-3.0f32..3.0);
            let mut shifted = w.clone();
            for b in shifted.get_mut("out.bias").unwrap().data_mut() {
                *b += shift;
            }
            let (qs, _) = shifted.q_values(&x, None).unwrap();
            assert_eq!(argmax(q.data()), argmax(qs.data()));
        }
        w.get_mut("out.bias").unwrap().data_mut()[0] = 0.0;
    }

    #[test]
    fn drqn_trunk_matches_simple_trunk_with_shared_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let simple = NetworkWeights::build(Architecture::SimpleDqn, 32, 3).unwrap();
        let mut drqn = NetworkWeights::build(Architecture::Drqn, 32, 4).unwrap();
        for i in 0..6 {
            let name = simple.names()[i].clone();
            drqn.get_mut(&name)
                .unwrap()
                .copy_from(simple.get(&name).unwrap())
                .unwrap();
        }
        let x = random_frame(&mut rng, 1);
        assert_eq!(
            simple.trunk_features(&x).unwrap(),
            drqn.trunk_features(&x).unwrap()
        );
    }

    #[test]
    fn container_round_trip() {
        let w = NetworkWeights::build(Architecture::Drqn, 32, 12).unwrap();
        let c = w.to_container(&[("episode".into(), "10".into())]);
        let bytes = c.to_bytes().unwrap();
        let back = NetworkWeights::from_container(&Container::read_from(bytes.as_slice()).unwrap())
            .unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn memory_stack_pads_then_slides() {
        let net = NetworkWeights::build(Architecture::StackedDqn, 32, 1).unwrap();
        let mut mem = EpisodeMemory::new(Architecture::StackedDqn);
        let frames: Vec<Tensor> = (1..=5)
            .map(|v| Tensor::full(&[1, 32, 32], v as f32))
            .collect();
        mem.observe(&net, &frames[0]).unwrap();
        let x = mem.input().unwrap();
        assert_eq!(x.shape(), &[4, 32, 32]);
        let firsts: Vec<f32> = x.data().chunks(1024).map(|c| c[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 0.0, 1.0]);
        for f in &frames[1..] {
            mem.observe(&net, f).unwrap();
        }
        let firsts: Vec<f32> = mem
            .input()
            .unwrap()
            .data()
            .chunks(1024)
            .map(|c| c[0])
            .collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0, 5.0]);
        mem.reset();
        assert!(mem.input().is_err());
    }

    #[test]
    fn memory_carries_and_resets_lstm_state() {
        let net = NetworkWeights::build(Architecture::Drqn, 32, 2).unwrap();
        let mut mem = EpisodeMemory::new(Architecture::Drqn);
        let f = Tensor::full(&[1, 32, 32], 0.5);
        let q0 = mem.observe(&net, &f).unwrap();
        let q1 = mem.observe(&net, &f).unwrap();
        assert_ne!(q0, q1);
        mem.reset();
        assert_eq!(mem.recurrent(), Some(&RecurrentState::zeros()));
        assert_eq!(mem.observe(&net, &f).unwrap(), q0);
    }
}
