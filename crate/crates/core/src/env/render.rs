use super::{Env, EnvState, MissionKind, Tile};
use crate::tensor::Tensor;

/// Fixed gray levels per material.
pub mod gray {
    pub const FLOOR: f32 = 0.2;
    pub const WALL: f32 = 0.5;
    pub const LAVA: f32 = 0.8;
    pub const GOAL: f32 = 1.0;
}

// Ray march limit in cells; every layout is enclosed well within this.
const MAX_CELLS: usize = 256;

fn shade(env: &Env, state: &EnvState, cell: (i32, i32)) -> Option<f32> {
    match env.tile(state, cell) {
        Tile::Floor => None,
        Tile::Wall => Some(gray::WALL),
        Tile::Lava => Some(gray::LAVA),
        Tile::Goal => Some(gray::GOAL),
        Tile::Door => Some(gray::WALL),
    }
}

/// Casts one ray per column across a 90° field of view centred on the
/// heading. The first solid cell fixes the column's material; its
/// perpendicular distance fixes the column height. Everything else is floor.
pub fn render(env: &Env, state: &EnvState) -> Tensor {
    let res = env.mission().resolution;
    let mut frame = vec![gray::FLOOR; res * res];
    let (dx, dy) = state.heading.delta();
    let (dir_x, dir_y) = (dx as f64, dy as f64);
    // camera plane points to the agent's right, half-width tan(45°) = 1
    let (plane_x, plane_y) = (dir_y, -dir_x);
    let pos_x = state.agent.0 as f64 + 0.5;
    let pos_y = state.agent.1 as f64 + 0.5;

    for col in 0..res {
        let camera = 2.0 * (col as f64 + 0.5) / res as f64 - 1.0;
        let ray_x = dir_x + plane_x * camera;
        let ray_y = dir_y + plane_y * camera;
        let Some((dist, mut value, cell)) = cast(env, state, (pos_x, pos_y), (ray_x, ray_y)) else {
            continue;
        };
        if let Some(sign) = cue_sign(env, state, cell, col < res / 2) {
            value = sign;
        }
        let line = res as f64 / dist;
        let centre = res as f64 / 2.0;
        for row in 0..res {
            let y = row as f64 + 0.5;
            if (y - centre).abs() < line / 2.0 {
                frame[row * res + col] = value;
            }
        }
    }
    Tensor::new(&[1, res, res], frame).expect("frame shape")
}

/// On the first frame the north door carries a two-colour sign: goal gray on
/// the left half of the view when the goal is north, on the right half when it
/// is south, lava gray on the other half. Both cues share one histogram.
fn cue_sign(env: &Env, state: &EnvState, cell: (i32, i32), left: bool) -> Option<f32> {
    if env.mission().kind != MissionKind::CueCorridor || state.steps != 0 || cell != (0, 1) {
        return None;
    }
    let goal_left = state.goal == cell;
    Some(if left == goal_left {
        gray::GOAL
    } else {
        gray::LAVA
    })
}

/// Grid DDA; returns perpendicular hit distance, material gray level and the
/// cell hit.
fn cast(
    env: &Env,
    state: &EnvState,
    pos: (f64, f64),
    ray: (f64, f64),
) -> Option<(f64, f32, (i32, i32))> {
    let mut map_x = pos.0.floor() as i32;
    let mut map_y = pos.1.floor() as i32;
    let delta_x = if ray.0 == 0.0 {
        f64::INFINITY
    } else {
        (1.0 / ray.0).abs()
    };
    let delta_y = if ray.1 == 0.0 {
        f64::INFINITY
    } else {
        (1.0 / ray.1).abs()
    };
    let (step_x, mut side_x) = if ray.0 < 0.0 {
        (-1, (pos.0 - map_x as f64) * delta_x)
    } else {
        (1, (map_x as f64 + 1.0 - pos.0) * delta_x)
    };
    let (step_y, mut side_y) = if ray.1 < 0.0 {
        (-1, (pos.1 - map_y as f64) * delta_y)
    } else {
        (1, (map_y as f64 + 1.0 - pos.1) * delta_y)
    };
    for _ in 0..MAX_CELLS {
        let dist = if side_x < side_y {
            map_x += step_x;
            let d = side_x;
            side_x += delta_x;
            d
        } else {
            map_y += step_y;
            let d = side_y;
            side_y += delta_y;
            d
        };
        if let Some(value) = shade(env, state, (map_x, map_y)) {
            return Some((dist, value, (map_x, map_y)));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Heading, Mission, Status};

    fn state(agent: (i32, i32), heading: Heading, goal: (i32, i32)) -> EnvState {
        EnvState {
            agent,
            heading,
            goal,
            steps: 1,
            status: Status::Running,
        }
    }

    fn count(frame: &Tensor, level: f32) -> usize {
        frame.data().iter().filter(|&&v| v == level).count()
    }

    #[test]
    fn facing_adjacent_wall_fills_frame() {
        let env = Env::new(Mission::basic()).unwrap();
        let f = render(&env, &state((0, 3), Heading::West, (6, 0)));
        assert_eq!(f.shape(), &[1, 32, 32]);
        assert_eq!(count(&f, gray::WALL), 32 * 32);
    }

    #[test]
    fn goal_behind_is_invisible() {
        let env = Env::new(Mission::basic()).unwrap();
        let ahead = render(&env, &state((3, 3), Heading::East, (6, 3)));
        let behind = render(&env, &state((3, 3), Heading::West, (6, 3)));
        assert_ne!(ahead, behind);
        assert!(count(&ahead, gray::GOAL) > 0);
        assert_eq!(count(&behind, gray::GOAL), 0);
    }

    #[test]
    fn values_use_the_four_levels() {
        let env = Env::new(Mission::cliff_walking()).unwrap();
        let f = render(&env, &state((0, 1), Heading::East, (8, 1)));
        for &v in f.data() {
            assert!([gray::FLOOR, gray::WALL, gray::LAVA, gray::GOAL].contains(&v));
        }
        assert!(count(&f, gray::GOAL) > 0);
        assert!(count(&f, gray::LAVA) > 0);
    }

    #[test]
    fn cue_shows_only_on_first_frame() {
        let env = Env::new(Mission::cue_corridor()).unwrap();
        let north = env.initial_states()[0];
        let south = env.initial_states()[1];
        assert_eq!(north.goal, (0, 1));
        let (a0, b0) = (render(&env, &north), render(&env, &south));
        assert_ne!(a0, b0);
        for f in [&a0, &b0] {
            assert_eq!(count(f, gray::GOAL), 32 * 16);
            assert_eq!(count(f, gray::LAVA), 32 * 16);
        }
        assert_eq!(a0.data()[0], gray::GOAL);
        assert_eq!(b0.data()[0], gray::LAVA);
        for heading in Heading::ALL {
            let mut a = north;
            let mut b = south;
            a.steps = 2;
            b.steps = 2;
            a.heading = heading;
            b.heading = heading;
            let fa = render(&env, &a);
            assert_eq!(fa, render(&env, &b));
            assert_eq!(count(&fa, gray::WALL), 32 * 32);
        }
    }

    #[test]
    fn resolution_is_configurable() {
        let env = Env::new(Mission {
            resolution: 28,
            ..Mission::basic()
        })
        .unwrap();
        let f = render(&env, &state((1, 1), Heading::North, (6, 6)));
        assert_eq!(f.shape(), &[1, 28, 28]);
    }
}
