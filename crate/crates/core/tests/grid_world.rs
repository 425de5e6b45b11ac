use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmha_core::grid_world::{generate_map, spawn, Triangular};
use rmha_core::{Action, Cell, Env, EnvConfig, GridMap};

const INF: u32 = u32::MAX;

/// Plain BFS over the occupancy grid, `blocked` cells excluded.
fn bfs(map: &GridMap, source: Cell, blocked: &dyn Fn(Cell) -> bool) -> Vec<u32> {
    let (w, h) = (map.width() as i32, map.height() as i32);
    let free = |c: Cell| c.x >= 0 && c.y >= 0 && c.x < w && c.y < h && !map.occupancy()[(c.y * w + c.x) as usize] && !blocked(c);
    let mut dist = vec![INF; (w * h) as usize];
    if !free(source) {
        return dist;
    }
    dist[(source.y * w + source.x) as usize] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(c) = queue.pop_front() {
        let d = dist[(c.y * w + c.x) as usize];
        for (dx, dy) in [(0, -1), (0, 1), (-1, 0), (1, 0)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if free(n) && dist[(n.y * w + n.x) as usize] == INF {
                dist[(n.y * w + n.x) as usize] = d + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

fn random_env(seed: u64, side: usize, agents: usize) -> Env {
    let map = generate_map(side, side, Triangular::new(0.0, 0.2, 0.4).unwrap(), seed, 2 * agents).unwrap();
    Env::spawn(map, agents, seed, EnvConfig::default()).unwrap()
}

#[test]
fn heuristic_channels_match_bfs_oracle() {
    for seed in 0..30 {
        let env = random_env(seed, 10, 3);
        let map = env.map();
        let w = map.width() as i32;
        for id in 0..env.n_agents() {
            let me = &env.agents()[id];
            let goal_dist = bfs(map, me.goal, &|_| false);
            let obs = env.observe(id);
            let r = (env.config().fov / 2) as i32;
            for dy in -r..=r {
                for dx in -r..=r {
                    let c = me.pos.offset(dx, dy);
                    for (ch, (mx, my)) in [(0, -1), (0, 1), (-1, 0), (1, 0)].into_iter().enumerate() {
                        let n = Cell::new(c.x + mx, c.y + my);
                        let inside = |p: Cell| map.in_bounds(p) && map.is_free(p);
                        let expected = inside(c)
                            && inside(n)
                            && goal_dist[(n.y * w + n.x) as usize] < goal_dist[(c.y * w + c.x) as usize];
                        assert_eq!(obs.at(ch, dx, dy) == 1.0, expected, "seed {seed} agent {id} offset ({dx},{dy}) channel {ch}");
                    }
                }
            }
        }
    }
}

#[test]
fn density_mean_of_training_distribution() {
    let tri = Triangular::training_default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mean = (0..10_000).map(|_| tri.sample(&mut rng)).sum::<f64>() / 10_000.0;
    assert!((0.25..=0.31).contains(&mean), "mean {mean}");
    assert!((mean - (0.0 + 0.33 + 0.5) / 3.0).abs() < 0.01);
}

#[test]
fn map_density_tracks_the_distribution() {
    let tri = Triangular::training_default();
    let total: f64 = (0..200).map(|s| generate_map(40, 40, tri, s, 2).unwrap().obstacle_density()).sum();
    let mean = total / 200.0;
    assert!((0.25..=0.31).contains(&mean), "mean {mean}");
}

#[test]
fn spawns_are_distinct_and_reachable() {
    for seed in 0..1000u64 {
        let map = generate_map(10, 10, Triangular::training_default(), seed, 16).unwrap();
        let n = 1 + (seed as usize % 8);
        let agents = spawn(&map, n, seed).unwrap();
        let mut starts: Vec<Cell> = agents.iter().map(|a| a.pos).collect();
        let mut goals: Vec<Cell> = agents.iter().map(|a| a.goal).collect();
        starts.sort();
        goals.sort();
        starts.dedup();
        goals.dedup();
        assert_eq!((starts.len(), goals.len()), (n, n), "seed {seed}");
        for a in &agents {
            assert!(map.is_free(a.pos) && map.is_free(a.goal));
            let d = bfs(&map, a.pos, &|_| false);
            assert_ne!(d[map.index(a.goal)], INF, "seed {seed}: goal unreachable");
        }
    }
}

#[test]
fn manhattan_matrix_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(1..8);
        let pos: Vec<Cell> = (0..n).map(|_| Cell::new(rng.random_range(0..40), rng.random_range(0..40))).collect();
        let d = rmha_core::grid_world::manhattan_matrix(&pos);
        for i in 0..n {
            assert_eq!(d[i][i], 0);
            for j in 0..n {
                assert_eq!(d[i][j], d[j][i]);
                assert_eq!(d[i][j] as i32, (pos[i].x - pos[j].x).abs() + (pos[i].y - pos[j].y).abs());
            }
        }
    }
}

/// Blocking oracle: `i` blocks when removing it shortens the path of some
/// unfinished agent in its field of view.
fn blocking_oracle(env: &Env) -> Vec<bool> {
    let agents = env.agents();
    let r = (env.config().fov / 2) as i32;
    let map = env.map();
    (0..agents.len())
        .map(|i| {
            (0..agents.len()).any(|j| {
                let (a, b) = (&agents[i], &agents[j]);
                if i == j || b.pos == b.goal || (a.pos.x - b.pos.x).abs() > r || (a.pos.y - b.pos.y).abs() > r {
                    return false;
                }
                let occupied = |skip: &[usize], c: Cell| agents.iter().enumerate().any(|(k, o)| !skip.contains(&k) && o.pos == c);
                let with = bfs(map, b.pos, &|c| occupied(&[j], c))[map.index(b.goal)];
                let without = bfs(map, b.pos, &|c| occupied(&[i, j], c))[map.index(b.goal)];
                without < with
            })
        })
        .collect()
}

#[test]
fn random_policy_steps_are_sound_and_rewards_recompute() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut steps = 0;
    let mut seed = 0;
    while steps < 2000 {
        let mut env = random_env(seed, 8, 6);
        seed += 1;
        let rewards = env.config().rewards;
        while !env.is_done() && steps < 2000 {
            let before = env.positions();
            let actions: Vec<Action> = (0..env.n_agents()).map(|_| Action::ALL[rng.random_range(0..5)]).collect();
            let out = env.step(&actions).unwrap();
            steps += 1;
            let after = env.positions();
            for i in 0..after.len() {
                assert!(env.map().is_free(after[i]));
                for j in 0..after.len() {
                    if i != j {
                        assert_ne!(after[i], after[j], "vertex collision");
                        assert!(!(after[i] == before[j] && after[j] == before[i]), "swap");
                    }
                }
            }
            let blocking = blocking_oracle(&env);
            for i in 0..after.len() {
                let reverted = actions[i] != Action::Stay && after[i] == before[i];
                let moved = after[i] != before[i];
                assert!(!moved || actions[i].apply(before[i]) == after[i]);
                assert_eq!(out.agents[i].collision, reverted);
                assert_eq!(out.agents[i].blocking, blocking[i]);
                let base = if reverted {
                    rewards.collision
                } else if moved {
                    rewards.move_cost
                } else if after[i] == env.agents()[i].goal {
                    rewards.goal
                } else {
                    rewards.idle_cost
                };
                let expected = base + if blocking[i] { rewards.blocking } else { 0.0 };
                assert_eq!(out.agents[i].extrinsic, expected);
            }
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let log: Vec<Vec<Action>> = (0..100).map(|_| (0..4).map(|_| Action::ALL[rng.random_range(0..5)]).collect()).collect();
    let run = || {
        let mut env = random_env(77, 10, 4);
        log.iter().map_while(|a| (!env.is_done()).then(|| env.step(a).unwrap())).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn episodes_end_at_the_step_limit() {
    let mut env = random_env(4, 10, 2);
    let mut n = 0;
    while !env.is_done() {
        env.step(&[Action::Stay, Action::Stay]).unwrap();
        n += 1;
    }
    assert_eq!(n, 256);
    assert!(env.step(&[Action::Stay, Action::Stay]).is_err());
}

#[test]
fn corridor_blocker_is_flagged() {
    // j at the left end must pass through i's cell to reach the right end.
    let map = GridMap::from_rows(&[".....", "@@@@@"]).unwrap();
    let env = Env::from_tasks(map, &[(Cell::new(2, 0), Cell::new(2, 0)), (Cell::new(1, 0), Cell::new(4, 0))], EnvConfig::default()).unwrap();
    assert_eq!(env.blocking_flags(), vec![true, false]);
    assert_eq!(blocking_oracle(&env), vec![true, false]);
    let open = GridMap::empty(10, 10).unwrap();
    let env = Env::from_tasks(open, &[(Cell::new(0, 0), Cell::new(0, 5)), (Cell::new(9, 9), Cell::new(9, 4))], EnvConfig::default()).unwrap();
    assert_eq!(env.blocking_flags(), vec![false, false]);
}
