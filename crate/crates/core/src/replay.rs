//! Replay memory with two samplers: uniform transitions with frame stacking
//! for the feed-forward networks, and fixed-length in-episode windows for
//! the recurrent one.

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

use crate::env::Action;
use crate::tensor::checkpoint::{CheckpointError, Container};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay buffer is empty")]
    Empty,
    #[error("insufficient data: no episode holds a window of {0} consecutive steps")]
    InsufficientData(usize),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ReplayError>;

/// One environment step. Frames are `[1, R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Tensor,
    pub action: Action,
    pub reward: f32,
    pub next_observation: Tensor,
    pub done: bool,
    pub episode: u64,
    pub step: u32,
}

/// Stacked minibatch. Inputs are `[B, depth, R, R]`, channel 0 the oldest.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedBatch {
    pub inputs: Tensor,
    pub actions: Vec<Action>,
    pub rewards: Vec<f32>,
    pub next_inputs: Tensor,
    pub dones: Vec<bool>,
    /// Buffer positions (0 = oldest stored) of the sampled transitions.
    pub indices: Vec<usize>,
}

impl StackedBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Consecutive transitions of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub transitions: Vec<Transition>,
    /// Buffer position of the first transition.
    pub start: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(ReplayError::Invalid("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total pushes since creation, evicted ones included.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.pushed += 1;
    }

    /// Whether stored transition `back` positions before `index` is step
    /// `step - back` of the same episode.
    fn predecessor(&self, index: usize, back: usize) -> Option<&Transition> {
        let t = &self.items[index];
        let p = self.items.get(index.checked_sub(back)?)?;
        (p.episode == t.episode && p.step as usize + back == t.step as usize).then_some(p)
    }

    /// True when every frame the stack needs is still stored. Fails only for
    /// the few transitions whose predecessors were just evicted.
    fn has_history(&self, index: usize, depth: usize) -> bool {
        let step = self.items[index].step as usize;
        (1..depth.min(step + 1)).all(|back| self.predecessor(index, back).is_some())
    }

    /// Frames for the stack ending at `index`: `depth` slots, oldest first,
    /// `None` where the episode had not started yet.
    fn history(&self, index: usize, depth: usize) -> Vec<Option<&Tensor>> {
        let step = self.items[index].step as usize;
        (0..depth)
            .rev()
            .map(|back| {
                if back == 0 {
                    Some(&self.items[index].observation)
                } else if back > step {
                    None
                } else {
                    self.predecessor(index, back).map(|p| &p.observation)
                }
            })
            .collect()
    }

    /// `depth`-frame stacks around stored transition `index`: the input
    /// ending at its observation and the next input ending at its next
    /// observation, both `[depth, R, R]` flattened.
    pub fn stack_at(&self, index: usize, depth: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        if index >= self.items.len() {
            return Err(ReplayError::Invalid(format!(
                "index {index} out of range for {} stored transitions",
                self.items.len()
            )));
        }
        if depth == 0 {
            return Err(ReplayError::Invalid("stack depth must be positive".into()));
        }
        let frame_len = self.items[index].observation.numel();
        let frames = self.history(index, depth);
        let mut input = Vec::with_capacity(depth * frame_len);
        for f in &frames {
            match f {
                Some(t) => input.extend_from_slice(t.data()),
                None => input.extend(std::iter::repeat_n(0.0, frame_len)),
            }
        }
        // next stack: drop the oldest slot, append the next observation
        let mut next = input[frame_len..].to_vec();
        next.extend_from_slice(self.items[index].next_observation.data());
        Ok((input, next))
    }

    /// Uniformly drawn transitions with `depth`-frame stacks (zero-padded at
    /// episode starts, never crossing episodes).
    pub fn sample_stacked<R: Rng + ?Sized>(
        &self,
        batch: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<StackedBatch> {
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        if batch == 0 || depth == 0 {
            return Err(ReplayError::Invalid(
                "batch size and stack depth must be positive".into(),
            ));
        }
        if !(0..self.items.len()).any(|i| self.has_history(i, depth)) {
            return Err(ReplayError::InsufficientData(depth));
        }
        let shape = self.items[0].observation.shape().to_vec();
        let (r1, r2) = (shape[1], shape[2]);
        let mut inputs = Vec::with_capacity(batch * depth * r1 * r2);
        let mut next_inputs = Vec::with_capacity(batch * depth * r1 * r2);
        let mut out = StackedBatch {
            inputs: Tensor::scalar(0.0),
            actions: Vec::with_capacity(batch),
            rewards: Vec::with_capacity(batch),
            next_inputs: Tensor::scalar(0.0),
            dones: Vec::with_capacity(batch),
            indices: Vec::with_capacity(batch),
        };
        while out.indices.len() < batch {
            let i = rng.gen_range(0..self.items.len());
            if !self.has_history(i, depth) {
                continue;
            }
            let (x, nx) = self.stack_at(i, depth)?;
            inputs.extend_from_slice(&x);
            next_inputs.extend_from_slice(&nx);
            let t = &self.items[i];
            out.actions.push(t.action);
            out.rewards.push(t.reward);
            out.dones.push(t.done);
            out.indices.push(i);
        }
        let dims = [batch, depth, r1, r2];
        out.inputs = Tensor::new(&dims, inputs).expect("stack shape");
        out.next_inputs = Tensor::new(&dims, next_inputs).expect("stack shape");
        Ok(out)
    }

    /// Buffer positions where a window of `length` consecutive steps of one
    /// episode begins.
    pub fn valid_starts(&self, length: usize) -> Vec<usize> {
        if length == 0 || self.items.len() < length {
            return Vec::new();
        }
        (0..=self.items.len() - length)
            .filter(|&s| {
                let first = &self.items[s];
                (1..length).all(|k| {
                    let t = &self.items[s + k];
                    t.episode == first.episode && t.step as usize == first.step as usize + k
                })
            })
            .collect()
    }

    /// `count` windows drawn independently and uniformly over valid starts.
    pub fn sample_sequences<R: Rng + ?Sized>(
        &self,
        count: usize,
        length: usize,
        rng: &mut R,
    ) -> Result<Vec<SequenceSample>> {
        if count == 0 || length == 0 {
            return Err(ReplayError::Invalid(
                "sequence count and length must be positive".into(),
            ));
        }
        let starts = self.valid_starts(length);
        if starts.is_empty() {
            return Err(ReplayError::InsufficientData(length));
        }
        Ok((0..count)
            .map(|_| {
                let start = starts[rng.gen_range(0..starts.len())];
                SequenceSample {
                    transitions: self.items.range(start..start + length).cloned().collect(),
                    start,
                }
            })
            .collect())
    }

    /// Snapshot in the checkpoint container format. Integer fields are
    /// stored bit-cast so the round trip is exact.
    pub fn to_container(&self) -> Container {
        let n = self.items.len();
        let mut meta = vec![
            ("kind".to_string(), "replay".to_string()),
            ("capacity".to_string(), self.capacity.to_string()),
            ("pushed".to_string(), self.pushed.to_string()),
            ("stored".to_string(), n.to_string()),
        ];
        if n == 0 {
            return Container {
                meta,
                tensors: Vec::new(),
            };
        }
        let fshape = self.items[0].observation.shape().to_vec();
        meta.push((
            "frame".to_string(),
            fshape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ));
        let mut obs = Vec::new();
        let mut next = Vec::new();
        let mut scalars = Vec::with_capacity(n * 6);
        for t in &self.items {
            obs.extend_from_slice(t.observation.data());
            next.extend_from_slice(t.next_observation.data());
            scalars.extend([
                f32::from_bits(t.action.index() as u32),
                t.reward,
                f32::from_bits(t.done as u32),
                f32::from_bits(t.episode as u32),
                f32::from_bits((t.episode >> 32) as u32),
                f32::from_bits(t.step),
            ]);
        }
        let mut frames = vec![n];
        frames.extend_from_slice(&fshape);
        Container {
            meta,
            tensors: vec![
                (
                    "observations".into(),
                    Tensor::new(&frames, obs).expect("shape"),
                ),
                (
                    "next_observations".into(),
                    Tensor::new(&frames, next).expect("shape"),
                ),
                (
                    "fields".into(),
                    Tensor::new(&[n, 6], scalars).expect("shape"),
                ),
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: &str| ReplayError::Checkpoint(CheckpointError::Format(m.to_string()));
        if c.meta("kind") != Some("replay") {
            return Err(bad("not a replay snapshot"));
        }
        let num = |k: &str| -> Result<u64> {
            c.require_meta(k)?
                .parse()
                .map_err(|_| bad(&format!("header key `{k}` is not an integer")))
        };
        let mut buf = Self::new(num("capacity")? as usize)?;
        let stored = num("stored")? as usize;
        if stored > buf.capacity {
            return Err(bad("more transitions than capacity"));
        }
        if stored > 0 {
            let tensor = |k: &str| {
                c.tensor(k)
                    .ok_or_else(|| bad(&format!("missing tensor `{k}`")))
            };
            let (obs, next, fields) = (
                tensor("observations")?,
                tensor("next_observations")?,
                tensor("fields")?,
            );
            if obs.shape() != next.shape()
                || obs.shape()[0] != stored
                || fields.shape() != [stored, 6]
            {
                return Err(bad("snapshot tensor shapes disagree"));
            }
            let fshape = &obs.shape()[1..];
            let flen: usize = fshape.iter().product();
            for i in 0..stored {
                let f = &fields.data()[i * 6..i * 6 + 6];
                let action = Action::from_index(f[0].to_bits() as usize)
                    .ok_or_else(|| bad("action index out of range"))?;
                let frame = |t: &Tensor| {
                    Tensor::new(fshape, t.data()[i * flen..(i + 1) * flen].to_vec()).expect("shape")
                };
                buf.items.push_back(Transition {
                    observation: frame(obs),
                    action,
                    reward: f[1],
                    next_observation: frame(next),
                    done: f[2].to_bits() != 0,
                    episode: f[3].to_bits() as u64 | (f[4].to_bits() as u64) << 32,
                    step: f[5].to_bits(),
                });
            }
        }
        buf.pushed = num("pushed")?;
        Ok(buf)
    }
}
