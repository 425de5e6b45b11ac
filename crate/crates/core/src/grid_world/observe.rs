use alloc::vec;
use alloc::vec::Vec;

use super::env::Env;
use super::map::{Action, Cell};

/// Number of binary FOV channels.
pub const CHANNELS: usize = 8;
/// Length of the scalar observation vector.
pub const VEC_LEN: usize = 7;

const CH_OBSTACLE: usize = 4;
const CH_AGENTS: usize = 5;
const CH_OWN_GOAL: usize = 6;
const CH_PEER_GOALS: usize = 7;

/// Local view of one agent.
///
/// `maps` holds `CHANNELS` planes of `fov x fov` cells in channel-major,
/// row-major order:
///
/// | channel | content |
/// |---|---|
/// | 0..4 | heuristic maps for Up, Down, Left, Right |
/// | 4 | obstacles (cells outside the map count as obstacles) |
/// | 5 | other agents |
/// | 6 | own goal, clamped onto the FOV border when outside |
/// | 7 | goals of visible peers, clamped the same way |
///
/// `vec` is `[dx, dy, d, r_ext, r_int, d_min, a_prev]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub fov: usize,
    pub maps: Vec<f64>,
    pub vec: [f64; VEC_LEN],
}

impl Observation {
    pub fn zeros(fov: usize) -> Self {
        Self {
            fov,
            maps: vec![0.0; CHANNELS * fov * fov],
            vec: [0.0; VEC_LEN],
        }
    }

    pub fn map_len(fov: usize) -> usize {
        CHANNELS * fov * fov
    }

    /// Value of `channel` at FOV offset `(dx, dy)` from the centre.
    pub fn at(&self, channel: usize, dx: i32, dy: i32) -> f64 {
        self.maps[self.index(channel, dx, dy)]
    }

    fn index(&self, channel: usize, dx: i32, dy: i32) -> usize {
        let r = (self.fov / 2) as i32;
        channel * self.fov * self.fov + ((dy + r) as usize) * self.fov + (dx + r) as usize
    }

    fn set(&mut self, channel: usize, dx: i32, dy: i32) {
        let i = self.index(channel, dx, dy);
        self.maps[i] = 1.0;
    }
}

fn clamp_offset(from: Cell, to: Cell, r: i32) -> (i32, i32) {
    ((to.x - from.x).clamp(-r, r), (to.y - from.y).clamp(-r, r))
}

impl Env {
    pub fn observe(&self, id: usize) -> Observation {
        let fov = self.config().fov;
        let r = (fov / 2) as i32;
        let map = self.map();
        let me = &self.agents()[id];
        let mut obs = Observation::zeros(fov);

        for dy in -r..=r {
            for dx in -r..=r {
                let c = me.pos.offset(dx, dy);
                if !map.is_free(c) {
                    obs.set(CH_OBSTACLE, dx, dy);
                    continue;
                }
                let here = self.goal_distance(id, c);
                for (ch, action) in Action::MOVES.into_iter().enumerate() {
                    let n = action.apply(c);
                    if map.is_free(n) && self.goal_distance(id, n) < here {
                        obs.set(ch, dx, dy);
                    }
                }
            }
        }

        let (gx, gy) = clamp_offset(me.pos, me.goal, r);
        obs.set(CH_OWN_GOAL, gx, gy);

        for other in self.agents() {
            if other.id == id {
                continue;
            }
            let (dx, dy) = (other.pos.x - me.pos.x, other.pos.y - me.pos.y);
            if dx.abs() > r || dy.abs() > r {
                continue;
            }
            obs.set(CH_AGENTS, dx, dy);
            let (px, py) = clamp_offset(me.pos, other.goal, r);
            obs.set(CH_PEER_GOALS, px, py);
        }

        let diag = map.diagonal();
        let (ddx, ddy) = ((me.goal.x - me.pos.x) as f64, (me.goal.y - me.pos.y) as f64);
        obs.vec = [
            ddx / diag,
            ddy / diag,
            me.pos.euclidean(me.goal) / diag,
            me.last_extrinsic_reward,
            me.last_intrinsic_reward,
            (me.last_min_distance / fov as f64).min(1.0),
            me.last_action.index() as f64 / 4.0,
        ];
        obs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_world::{EnvConfig, GridMap};

    fn env(tasks: &[(Cell, Cell)]) -> Env {
        Env::from_tasks(GridMap::empty(5, 5).unwrap(), tasks, EnvConfig::default()).unwrap()
    }

    #[test]
    fn right_heuristic_set_next_to_goal() {
        let e = env(&[(Cell::new(1, 2), Cell::new(2, 2))]);
        let o = e.observe(0);
        assert_eq!(o.at(Action::Right.index(), 0, 0), 1.0);
        assert_eq!(o.at(Action::Left.index(), 0, 0), 0.0);
        assert_eq!(o.at(Action::Up.index(), 0, 0), 0.0);
        assert_eq!(o.at(CH_OWN_GOAL, 1, 0), 1.0);
    }

    #[test]
    fn no_heuristic_at_goal() {
        let e = env(&[(Cell::new(2, 2), Cell::new(2, 2))]);
        let o = e.observe(0);
        for ch in 0..4 {
            assert_eq!(o.at(ch, 0, 0), 0.0);
        }
    }

    #[test]
    fn outside_cells_are_obstacles() {
        let e = env(&[(Cell::new(0, 0), Cell::new(4, 4))]);
        let o = e.observe(0);
        assert_eq!(o.at(CH_OBSTACLE, -1, -1), 1.0);
        assert_eq!(o.at(CH_OBSTACLE, 1, 0), 0.0);
        for ch in 0..4 {
            assert_eq!(o.at(ch, -1, 0), 0.0);
        }
        // far goal projected to the bottom-right corner of the view
        assert_eq!(o.at(CH_OWN_GOAL, 1, 1), 1.0);
    }

    #[test]
    fn peers_and_their_goals_are_visible() {
        let e = env(&[(Cell::new(2, 2), Cell::new(0, 0)), (Cell::new(3, 2), Cell::new(4, 4))]);
        let o = e.observe(0);
        assert_eq!(o.at(CH_AGENTS, 1, 0), 1.0);
        assert_eq!(o.at(CH_PEER_GOALS, 1, 1), 1.0);
        assert_eq!(o.maps[CH_AGENTS * 9..(CH_AGENTS + 1) * 9].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn scalar_vector_is_normalized() {
        let e = env(&[(Cell::new(0, 0), Cell::new(4, 4))]);
        let o = e.observe(0);
        let diag = (50.0f64).sqrt();
        assert!((o.vec[0] - 4.0 / diag).abs() < 1e-12);
        assert!((o.vec[2] - 32.0f64.sqrt() / diag).abs() < 1e-12);
        assert_eq!(o.vec[6], 1.0);
        assert!(o.vec[..3].iter().all(|v| v.abs() <= 1.0));
    }
}
