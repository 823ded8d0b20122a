//! Exact references over the latent (fully observed) MDP.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, Env, EnvError, EnvState, Heading, MissionKind, Status};

/// Latent state used as a table key. `phase` only distinguishes cue-corridor
/// steps before the doors open; it is zero elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentKey {
    pub agent: (i32, i32),
    pub heading: Heading,
    pub goal: (i32, i32),
    pub phase: u32,
}

impl LatentKey {
    pub fn of(env: &Env, state: &EnvState) -> Self {
        let phase = match env.mission().kind {
            MissionKind::CueCorridor => state.steps.min(env.mission().cue_delay),
            _ => 0,
        };
        Self {
            agent: state.agent,
            heading: state.heading,
            goal: state.goal,
            phase,
        }
    }

    fn to_state(self) -> EnvState {
        EnvState {
            agent: self.agent,
            heading: self.heading,
            goal: self.goal,
            steps: self.phase,
            status: Status::Running,
        }
    }
}

/// Minimum number of actions (turns included) from `state` to the goal,
/// ignoring the step budget. `None` when the goal cannot be reached.
pub fn bfs_optimal_steps(env: &Env, state: &EnvState) -> Option<u32> {
    if !state.is_running() {
        return None;
    }
    let start = LatentKey::of(env, state);
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([(start, 0u32)]);
    while let Some((key, depth)) = queue.pop_front() {
        for action in Action::ALL {
            let (next, _) = env.advance(&key.to_state(), action);
            match next.status {
                Status::Won => return Some(depth + 1),
                Status::Running => {
                    let k = LatentKey::of(env, &next);
                    if seen.insert(k) {
                        queue.push_back((k, depth + 1));
                    }
                }
                _ => {}
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub episodes: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Start episodes from uniformly drawn latent states instead of spawns.
    pub exploring_starts: bool,
}

impl TabularConfig {
    pub fn new(alpha: f64, gamma: f64, episodes: usize, seed: u64) -> Self {
        Self {
            alpha,
            gamma,
            episodes,
            epsilon: 0.2,
            seed,
            exploring_starts: true,
        }
    }
}

/// Q-table with optimistic initial values: unvisited entries read as the
/// win reward, an upper bound on any return.
#[derive(Debug, Clone)]
pub struct QTable {
    values: HashMap<LatentKey, [f64; 4]>,
    initial: f64,
}

impl QTable {
    fn new(initial: f64) -> Self {
        Self {
            values: HashMap::new(),
            initial,
        }
    }

    pub fn q(&self, env: &Env, state: &EnvState) -> [f64; 4] {
        self.values
            .get(&LatentKey::of(env, state))
            .copied()
            .unwrap_or([self.initial; 4])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Argmax with lowest-index tie-break.
    pub fn greedy(&self, env: &Env, state: &EnvState) -> Action {
        let q = self.q(env, state);
        let mut best = 0;
        for a in 1..4 {
            if q[a] > q[best] {
                best = a;
            }
        }
        Action::ALL[best]
    }

    /// Plays the greedy policy under the real step budget; returns the final
    /// state and the undiscounted return.
    pub fn rollout(&self, env: &Env, start: EnvState) -> (EnvState, f32) {
        let mut state = start;
        let mut ret = 0.0;
        while state.is_running() {
            let out = env
                .step(&state, self.greedy(env, &state))
                .expect("running state");
            ret += out.reward;
            state = out.state;
        }
        (state, ret)
    }
}

fn random_start(env: &Env, rng: &mut ChaCha8Rng) -> EnvState {
    let goals = env.goal_cells();
    let goal = *goals.choose(rng).expect("mission has a goal");
    let cells: Vec<_> = env
        .walkable_cells()
        .into_iter()
        .filter(|&c| c != goal)
        .collect();
    let agent = *cells.choose(rng).expect("walkable cell");
    let heading = Heading::ALL[rng.gen_range(0..4)];
    let steps = match env.mission().kind {
        MissionKind::CueCorridor => rng.gen_range(0..=env.mission().cue_delay),
        _ => 0,
    };
    EnvState {
        agent,
        heading,
        goal,
        steps,
        status: Status::Running,
    }
}

/// Tabular Q-learning on the latent MDP with ε-greedy behaviour.
///
/// Episodes are cut at the mission's step budget but the cut is treated as
/// truncation (the last update still bootstraps), so the table converges to
/// the budget-free optimum.
pub fn tabular_q_solve(env: &Env, config: &TabularConfig) -> Result<QTable, EnvError> {
    if !(0.0..1.0).contains(&config.gamma) {
        return Err(EnvError::InvalidParameter(format!(
            "gamma must lie in [0, 1), got {}",
            config.gamma
        )));
    }
    if !(config.alpha > 0.0 && config.alpha <= 1.0) {
        return Err(EnvError::InvalidParameter(format!(
            "alpha must lie in (0, 1], got {}",
            config.alpha
        )));
    }
    if !(0.0..=1.0).contains(&config.epsilon) {
        return Err(EnvError::InvalidParameter(format!(
            "epsilon must lie in [0, 1], got {}",
            config.epsilon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = env.mission().rewards.win as f64;
    let mut table = QTable::new(initial);
    let max_steps = env.mission().max_steps;
    for _ in 0..config.episodes {
        let mut state = if config.exploring_starts {
            random_start(env, &mut rng)
        } else {
            env.initial_state(rng.gen())
        };
        for _ in 0..max_steps {
            let action = if rng.gen::<f64>() < config.epsilon {
                Action::ALL[rng.gen_range(0..4)]
            } else {
                table.greedy(env, &state)
            };
            let (next, reward) = env.advance(&state, action);
            let bootstrap = if next.is_running() {
                let q = table.q(env, &next);
                config.gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            } else {
                0.0
            };
            let entry = table
                .values
                .entry(LatentKey::of(env, &state))
                .or_insert([initial; 4]);
            let a = action.index();
            entry[a] += config.alpha * (reward as f64 + bootstrap - entry[a]);
            if !next.is_running() {
                break;
            }
            state = next;
        }
    }
    Ok(table)
}

/// Best win rate over deterministic policies that see only the current
/// frame, averaged over every initial state `reset` can produce.
///
/// Enumerates all maps from reachable frames to actions, so it returns
/// `None` when more than `max_observations` distinct frames are reachable.
pub fn memoryless_ceiling(env: &Env, max_observations: usize) -> Option<f64> {
    let frame_key = |s: &EnvState| -> Vec<u32> {
        env.observe(s)
            .frame
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    // reachable running states under any action sequence within the budget
    let starts = env.initial_states();
    let mut seen: HashSet<EnvState> = starts.iter().copied().collect();
    let mut queue: VecDeque<EnvState> = starts.iter().copied().collect();
    let mut frames: HashMap<Vec<u32>, usize> = HashMap::new();
    while let Some(s) = queue.pop_front() {
        let n = frames.len();
        frames.entry(frame_key(&s)).or_insert(n);
        if frames.len() > max_observations {
            return None;
        }
        for a in Action::ALL {
            let out = env.step(&s, a).ok()?;
            if out.state.is_running() && seen.insert(out.state) {
                queue.push_back(out.state);
            }
        }
    }
    let k = frames.len();
    let mut best = 0usize;
    let mut policy = vec![0usize; k];
    // (state, frame index) cache so rollouts avoid re-rendering
    let mut index: HashMap<EnvState, usize> = HashMap::new();
    for s in &seen {
        index.insert(*s, frames[&frame_key(s)]);
    }
    loop {
        let wins = starts
            .iter()
            .filter(|&&start| {
                let mut s = start;
                while s.is_running() {
                    let a = Action::ALL[policy[index[&s]]];
                    s = env.step(&s, a).expect("running state").state;
                }
                s.status == Status::Won
            })
            .count();
        best = best.max(wins);
        // next policy in base-4 counting order
        let mut i = 0;
        while i < k && policy[i] == 3 {
            policy[i] = 0;
            i += 1;
        }
        if i == k {
            break;
        }
        policy[i] += 1;
    }
    Some(best as f64 / starts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Mission;

    fn running(agent: (i32, i32), heading: Heading, goal: (i32, i32)) -> EnvState {
        EnvState {
            agent,
            heading,
            goal,
            steps: 0,
            status: Status::Running,
        }
    }

    /// Shortest winning action sequence by exhaustive enumeration.
    fn brute_force(env: &Env, start: &EnvState, max_depth: u32) -> Option<u32> {
        fn go(env: &Env, s: &EnvState, depth: u32, limit: u32) -> bool {
            if depth == limit {
                return false;
            }
            Action::ALL.iter().any(|&a| {
                let (next, _) = env.advance(s, a);
                match next.status {
                    Status::Won => depth + 1 == limit,
                    Status::Running => go(env, &next, depth + 1, limit),
                    _ => false,
                }
            })
        }
        (1..=max_depth).find(|&limit| go(env, start, 0, limit))
    }

    #[test]
    fn adjacent_goal_cases() {
        let env = Env::new(Mission::basic()).unwrap();
        let facing = running((5, 2), Heading::East, (6, 2));
        assert_eq!(bfs_optimal_steps(&env, &facing), Some(1));
        let away = running((5, 2), Heading::West, (6, 2));
        assert_eq!(bfs_optimal_steps(&env, &away), Some(1));
        assert_eq!(brute_force(&env, &away, 4), Some(1));
    }

    #[test]
    fn cliff_start_matches_exhaustive_search() {
        let env = Env::new(Mission::cliff_walking()).unwrap();
        let start = env.initial_state(0);
        let bfs = bfs_optimal_steps(&env, &start).unwrap();
        assert_eq!(bfs, 8);
        assert_eq!(brute_force(&env, &start, 9), Some(bfs));
    }

    #[test]
    fn basic_spawns_match_exhaustive_search() {
        let env = Env::new(Mission::basic()).unwrap();
        for s in env.initial_states().into_iter().step_by(5) {
            let bfs = bfs_optimal_steps(&env, &s).unwrap();
            assert_eq!(brute_force(&env, &s, bfs), Some(bfs), "{s:?}");
        }
    }

    #[test]
    fn unreachable_goal_is_reported() {
        // goal placed inside the lava ring, walled off from the walkway by lava
        let env = Env::new(Mission::cliff_walking()).unwrap();
        let s = running((0, 1), Heading::East, (20, 20));
        assert_eq!(bfs_optimal_steps(&env, &s), None);
    }

    #[test]
    fn cue_corridor_waits_for_doors() {
        let env = Env::new(Mission::cue_corridor()).unwrap();
        for s in env.initial_states() {
            assert_eq!(bfs_optimal_steps(&env, &s), Some(4));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let env = Env::new(Mission::basic()).unwrap();
        assert!(tabular_q_solve(&env, &TabularConfig::new(0.1, 1.0, 1, 0)).is_err());
        assert!(tabular_q_solve(&env, &TabularConfig::new(0.0, 0.9, 1, 0)).is_err());
        assert!(tabular_q_solve(&env, &TabularConfig::new(1.5, 0.9, 1, 0)).is_err());
    }

    #[test]
    fn myopic_table_grabs_immediate_reward() {
        let env = Env::new(Mission::basic()).unwrap();
        let table = tabular_q_solve(&env, &TabularConfig::new(0.5, 0.0, 3_000, 3)).unwrap();
        // next to the goal, facing it or facing away: the winning move is greedy
        let facing = running((5, 4), Heading::East, (6, 4));
        assert_eq!(table.greedy(&env, &facing), Action::Forward);
        let away = running((5, 4), Heading::West, (6, 4));
        assert_eq!(table.greedy(&env, &away), Action::Backward);
        let q = table.q(&env, &facing);
        assert!((q[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn cue_corridor_memoryless_ceiling_is_half() {
        let env = Env::new(Mission::cue_corridor()).unwrap();
        assert_eq!(memoryless_ceiling(&env, 8), Some(0.5));
        let basic = Env::new(Mission::basic()).unwrap();
        assert_eq!(memoryless_ceiling(&basic, 8), None);
    }
}
