//! Grid-world reconstructions of the missions, rendered through a
//! first-person ray caster so agents only see what is in front of them.

mod mission;
mod oracle;
mod render;
mod trajectory;

pub use mission::{Mission, MissionKind, RewardSpec};
pub use oracle::{
    bfs_optimal_steps, memoryless_ceiling, tabular_q_solve, LatentKey, QTable, TabularConfig,
};
pub use render::{gray, render};
pub use trajectory::{read_trajectory, write_trajectory, TrajectoryRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid mission: {0}")]
    InvalidMission(String),
    #[error("step called on a finished episode ({0:?})")]
    Finished(Status),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed trajectory line {line}: {message}")]
    Trajectory { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Forward,
    Backward,
    TurnRight,
    TurnLeft,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::Forward,
        Action::Backward,
        Action::TurnRight,
        Action::TurnLeft,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn id(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::Backward => "backward",
            Action::TurnRight => "turn-right",
            Action::TurnLeft => "turn-left",
        }
    }
}

impl std::str::FromStr for Action {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| EnvError::InvalidParameter(format!("unknown action `{s}`")))
    }
}

/// Cardinal heading; `y` grows northwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::North => (0, 1),
            Heading::East => (1, 0),
            Heading::South => (0, -1),
            Heading::West => (-1, 0),
        }
    }

    pub fn right(self) -> Heading {
        match self {
            Heading::North => Heading::East,
            Heading::East => Heading::South,
            Heading::South => Heading::West,
            Heading::West => Heading::North,
        }
    }

    pub fn left(self) -> Heading {
        self.right().right().right()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Running,
    Won,
    Died,
    TimedOut,
}

pub type Cell = (i32, i32);

/// Full latent state; agents never see this directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: Cell,
    pub heading: Heading,
    pub goal: Cell,
    pub steps: u32,
    pub status: Status,
}

impl EnvState {
    pub fn is_running(&self) -> bool {
        self.status == Status::Running
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[1, R, R]` grayscale in `[0, 1]`.
    pub frame: Tensor,
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub observation: Observation,
    pub reward: f32,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Floor,
    Wall,
    Lava,
    Goal,
    /// Cue-corridor door; shut while the cue delay runs.
    Door,
}

/// A mission plus its static layout.
#[derive(Debug, Clone)]
pub struct Env {
    mission: Mission,
}

impl Env {
    pub fn new(mission: Mission) -> Result<Self, EnvError> {
        mission.validate()?;
        Ok(Self { mission })
    }

    pub fn mission(&self) -> &Mission {
        &self.mission
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [1, self.mission.resolution, self.mission.resolution]
    }

    fn width(&self) -> i32 {
        self.mission.width as i32
    }

    fn height(&self) -> i32 {
        self.mission.height as i32
    }

    /// Tile at `cell` for the given latent state.
    pub fn tile(&self, state: &EnvState, cell: Cell) -> Tile {
        if cell == state.goal {
            return match self.mission.kind {
                MissionKind::CueCorridor => Tile::Door,
                _ => Tile::Goal,
            };
        }
        let (x, y) = cell;
        let (w, h) = (self.width(), self.height());
        match self.mission.kind {
            MissionKind::Basic => {
                if (0..w).contains(&x) && (0..h).contains(&y) {
                    Tile::Floor
                } else {
                    Tile::Wall
                }
            }
            MissionKind::CliffWalking => {
                if (0..w).contains(&x) && (0..h).contains(&y) {
                    Tile::Floor
                } else if (-1..=w).contains(&x) && (-1..=h).contains(&y) {
                    Tile::Lava
                } else {
                    Tile::Wall
                }
            }
            MissionKind::CueCorridor => match cell {
                (0, 0) => Tile::Floor,
                (0, 1) | (0, -1) => Tile::Door,
                _ => Tile::Wall,
            },
        }
    }

    /// Cells the agent may legally stand on while the episode runs.
    pub fn walkable_cells(&self) -> Vec<Cell> {
        match self.mission.kind {
            MissionKind::CueCorridor => vec![(0, 0)],
            _ => {
                let mut cells = Vec::new();
                for y in 0..self.height() {
                    for x in 0..self.width() {
                        cells.push((x, y));
                    }
                }
                cells
            }
        }
    }

    /// Every goal position `reset` can produce.
    pub fn goal_cells(&self) -> Vec<Cell> {
        match self.mission.kind {
            MissionKind::Basic => (0..self.height()).map(|y| (self.width() - 1, y)).collect(),
            MissionKind::CliffWalking => vec![(self.width(), self.height() / 2)],
            MissionKind::CueCorridor => vec![(0, 1), (0, -1)],
        }
    }

    /// Every agent spawn pose `reset` can produce.
    pub fn spawn_poses(&self) -> Vec<(Cell, Heading)> {
        match self.mission.kind {
            MissionKind::Basic => (0..self.height())
                .map(|y| ((0, y), Heading::East))
                .collect(),
            MissionKind::CliffWalking => vec![((0, self.height() / 2), Heading::East)],
            MissionKind::CueCorridor => vec![((0, 0), Heading::North)],
        }
    }

    /// All initial states `reset` can return, in a fixed order.
    pub fn initial_states(&self) -> Vec<EnvState> {
        let mut out = Vec::new();
        for (agent, heading) in self.spawn_poses() {
            for goal in self.goal_cells() {
                out.push(EnvState {
                    agent,
                    heading,
                    goal,
                    steps: 0,
                    status: Status::Running,
                });
            }
        }
        out
    }

    pub fn initial_state(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (agent, heading, goal) = match self.mission.kind {
            MissionKind::Basic => {
                let ya = rng.gen_range(0..self.height());
                let yg = rng.gen_range(0..self.height());
                ((0, ya), Heading::East, (self.width() - 1, yg))
            }
            MissionKind::CliffWalking => {
                let row = self.height() / 2;
                ((0, row), Heading::East, (self.width(), row))
            }
            MissionKind::CueCorridor => {
                let goal = if rng.gen_bool(0.5) { (0, 1) } else { (0, -1) };
                ((0, 0), Heading::North, goal)
            }
        };
        EnvState {
            agent,
            heading,
            goal,
            steps: 0,
            status: Status::Running,
        }
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        let state = self.initial_state(seed);
        let obs = self.observe(&state);
        (state, obs)
    }

    pub fn observe(&self, state: &EnvState) -> Observation {
        Observation {
            frame: render(self, state),
            step: state.steps,
        }
    }

    /// Dynamics without the step budget; returns next state and reward.
    pub(crate) fn advance(&self, state: &EnvState, action: Action) -> (EnvState, f32) {
        let rewards = self.mission.rewards;
        let mut next = *state;
        next.steps += 1;
        let mut reward = rewards.step;
        match action {
            // The booth keeps the agent facing north.
            Action::TurnRight | Action::TurnLeft
                if self.mission.kind == MissionKind::CueCorridor => {}
            Action::TurnRight => next.heading = state.heading.right(),
            Action::TurnLeft => next.heading = state.heading.left(),
            Action::Forward | Action::Backward => {
                let (dx, dy) = state.heading.delta();
                let sign = if action == Action::Forward { 1 } else { -1 };
                let target = (state.agent.0 + sign * dx, state.agent.1 + sign * dy);
                match self.tile(state, target) {
                    Tile::Wall => {}
                    Tile::Floor => next.agent = target,
                    Tile::Goal => {
                        next.agent = target;
                        next.status = Status::Won;
                        reward += rewards.win;
                    }
                    Tile::Lava => {
                        next.agent = target;
                        next.status = Status::Died;
                        reward += rewards.loss;
                    }
                    Tile::Door => {
                        if state.steps >= self.mission.cue_delay {
                            next.agent = target;
                            if target == state.goal {
                                next.status = Status::Won;
                                reward += rewards.win;
                            } else {
                                next.status = Status::Died;
                                reward += rewards.loss;
                            }
                        }
                    }
                }
            }
        }
        (next, reward)
    }

    /// Applies one action. Stepping a finished episode is an error.
    pub fn step(&self, state: &EnvState, action: Action) -> Result<StepOutcome, EnvError> {
        if !state.is_running() {
            return Err(EnvError::Finished(state.status));
        }
        let (mut next, mut reward) = self.advance(state, action);
        if next.is_running() && next.steps >= self.mission.max_steps {
            next.status = Status::TimedOut;
            reward += self.mission.rewards.loss;
        }
        let observation = self.observe(&next);
        Ok(StepOutcome {
            state: next,
            observation,
            reward,
            done: !next.is_running(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn running(agent: Cell, heading: Heading, goal: Cell, steps: u32) -> EnvState {
        EnvState {
            agent,
            heading,
            goal,
            steps,
            status: Status::Running,
        }
    }

    #[test]
    fn cliff_reset_ignores_seed() {
        let env = Env::new(Mission::cliff_walking()).unwrap();
        let first = env.reset(0);
        for seed in [1, 7, 12345, u64::MAX] {
            assert_eq!(env.reset(seed), first);
        }
    }

    #[test]
    fn basic_reset_is_seeded() {
        let env = Env::new(Mission::basic()).unwrap();
        assert_eq!(env.reset(99), env.reset(99));
        let s = env.initial_state(99);
        assert_eq!(s.agent.0, 0);
        assert_eq!(s.goal.0, 6);
        assert_eq!(s.heading, Heading::East);
    }

    #[test]
    fn basic_goal_rows_are_uniform() {
        // chi-square over 10 000 seeded draws, 7 cells, 6 dof; 99.9% critical value 22.46
        let env = Env::new(Mission::basic()).unwrap();
        let n = 10_000;
        let mut counts: HashMap<Cell, usize> = HashMap::new();
        for seed in 0..n {
            *counts.entry(env.initial_state(seed).goal).or_default() += 1;
        }
        assert_eq!(counts.len(), 7);
        let expected = n as f64 / 7.0;
        let sigma = (n as f64 * (1.0 / 7.0) * (6.0 / 7.0)).sqrt();
        let mut chi2 = 0.0;
        for &c in counts.values() {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        assert!(chi2 < 22.46, "chi2 = {chi2}");
    }

    #[test]
    fn forward_onto_goal_wins() {
        let env = Env::new(Mission::basic()).unwrap();
        let s = running((5, 3), Heading::East, (6, 3), 4);
        let out = env.step(&s, Action::Forward).unwrap();
        assert!(out.done);
        assert_eq!(out.state.status, Status::Won);
        assert!((out.reward - 0.99).abs() < 1e-6);
    }

    #[test]
    fn last_allowed_step_times_out() {
        let env = Env::new(Mission::basic()).unwrap();
        let s = running((0, 0), Heading::East, (6, 3), 39);
        let out = env.step(&s, Action::TurnLeft).unwrap();
        assert!(out.done);
        assert_eq!(out.state.status, Status::TimedOut);
        assert_eq!(out.state.steps, 40);
        assert!((out.reward + 1.01).abs() < 1e-6);
    }

    #[test]
    fn stepping_into_lava_dies() {
        let env = Env::new(Mission::cliff_walking()).unwrap();
        let s = running((3, 2), Heading::North, (8, 1), 5);
        let out = env.step(&s, Action::Forward).unwrap();
        assert_eq!(out.state.status, Status::Died);
        assert!((out.reward + 1.01).abs() < 1e-6);
    }

    #[test]
    fn blocked_move_costs_a_step() {
        let env = Env::new(Mission::basic()).unwrap();
        let s = running((0, 2), Heading::West, (6, 3), 0);
        let out = env.step(&s, Action::Forward).unwrap();
        assert_eq!(out.state.agent, (0, 2));
        assert_eq!(out.state.steps, 1);
        assert!((out.reward + 0.01).abs() < 1e-6);
        assert!(!out.done);
    }

    #[test]
    fn finished_episode_rejects_steps() {
        let env = Env::new(Mission::basic()).unwrap();
        let mut s = running((0, 0), Heading::East, (6, 0), 3);
        s.status = Status::Won;
        assert!(matches!(
            env.step(&s, Action::Forward),
            Err(EnvError::Finished(Status::Won))
        ));
    }

    #[test]
    fn turns_compose() {
        for h in Heading::ALL {
            assert_eq!(h.left().right(), h);
            assert_eq!(h.right().right().right().right(), h);
        }
    }

    #[test]
    fn cue_doors_stay_shut_during_delay() {
        let env = Env::new(Mission::cue_corridor()).unwrap();
        let mut s = running((0, 0), Heading::North, (0, 1), 0);
        for _ in 0..3 {
            let out = env.step(&s, Action::Forward).unwrap();
            assert_eq!(out.state.agent, (0, 0));
            s = out.state;
        }
        let out = env.step(&s, Action::Forward).unwrap();
        assert_eq!(out.state.status, Status::Won);

        let s = running((0, 0), Heading::North, (0, 1), 3);
        let out = env.step(&s, Action::Backward).unwrap();
        assert_eq!(out.state.status, Status::Died);
    }

    #[test]
    fn cue_booth_ignores_turns() {
        let env = Env::new(Mission::cue_corridor()).unwrap();
        let s = running((0, 0), Heading::North, (0, -1), 0);
        for a in [Action::TurnLeft, Action::TurnRight] {
            let out = env.step(&s, a).unwrap();
            assert_eq!(out.state.heading, Heading::North);
            assert!(out.state.is_running());
        }
    }
}
