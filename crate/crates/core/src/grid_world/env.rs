use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::map::{Action, Cell, GridMap, UNREACHABLE};
use crate::{Error, Result};

/// Reward schedule for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardTable {
    pub move_cost: f64,
    pub idle_cost: f64,
    pub goal: f64,
    pub collision: f64,
    pub blocking: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        Self {
            move_cost: -0.3,
            idle_cost: -0.3,
            goal: 0.0,
            collision: -2.0,
            blocking: -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvConfig {
    pub max_steps: usize,
    /// Side of the square field of view (odd).
    pub fov: usize,
    /// Scale of the novelty reward.
    pub eta: f64,
    /// Capacity of the visited-cell FIFO.
    pub memory: usize,
    /// Manhattan radius within which agents exchange messages.
    pub comm_radius: u32,
    pub rewards: RewardTable,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 256,
            fov: 3,
            eta: 0.1,
            memory: 8,
            comm_radius: 40,
            rewards: RewardTable::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fov == 0 || self.fov.is_multiple_of(2) {
            return Err(Error::InvalidConfig(alloc::format!("fov must be odd and positive, got {}", self.fov)));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub id: usize,
    pub pos: Cell,
    pub goal: Cell,
    pub last_action: Action,
    pub last_extrinsic_reward: f64,
    pub last_intrinsic_reward: f64,
    /// Unscaled minimum distance to the memory buffer from the last step.
    pub last_min_distance: f64,
    pub memory: VecDeque<Cell>,
    pub done: bool,
}

impl AgentState {
    pub fn new(id: usize, pos: Cell, goal: Cell) -> Self {
        Self {
            id,
            pos,
            goal,
            last_action: Action::Stay,
            last_extrinsic_reward: 0.0,
            last_intrinsic_reward: 0.0,
            last_min_distance: 0.0,
            memory: VecDeque::new(),
            done: pos == goal,
        }
    }

    pub fn at_goal(&self) -> bool {
        self.pos == self.goal
    }
}

/// Minimum Euclidean distance from `pos` to the buffered cells, if any.
pub fn memory_distance(pos: Cell, memory: &VecDeque<Cell>) -> Option<f64> {
    memory.iter().map(|&m| pos.euclidean(m)).reduce(f64::min)
}

/// Novelty reward: `eta` times the distance to the nearest recently visited
/// cell, clipped to `[0, eta * fov]`, and zero at the goal or with an empty
/// buffer.
pub fn intrinsic_reward(agent: &AgentState, eta: f64, fov: usize) -> f64 {
    if agent.at_goal() {
        return 0.0;
    }
    match memory_distance(agent.pos, &agent.memory) {
        Some(d) => (eta * d).clamp(0.0, eta * fov as f64),
        None => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentOutcome {
    pub pos: Cell,
    pub extrinsic: f64,
    pub intrinsic: f64,
    pub collision: bool,
    pub blocking: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub agents: Vec<AgentOutcome>,
    pub episode_done: bool,
    pub step_index: usize,
}

impl StepOutcome {
    pub fn collisions(&self) -> usize {
        self.agents.iter().filter(|a| a.collision).count()
    }

    pub fn extrinsic_sum(&self) -> f64 {
        self.agents.iter().map(|a| a.extrinsic).sum()
    }
}

/// Picks `n` distinct starts and `n` distinct goals from the map's largest
/// free region. Starts and goals are disjoint.
pub fn spawn(map: &GridMap, n: usize, seed: u64) -> Result<Vec<AgentState>> {
    let available = map.component().len();
    if available < 2 * n {
        return Err(Error::SpawnInfeasible {
            agents: n,
            available,
            needed: 2 * n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = map.component().to_vec();
    let (picked, _) = cells.partial_shuffle(&mut rng, 2 * n);
    Ok((0..n).map(|i| AgentState::new(i, picked[i], picked[n + i])).collect())
}

/// Moves after collision resolution plus per-agent revert flags.
///
/// A proposed move is reverted when it leaves the map or enters an obstacle,
/// when two or more agents target the same cell (movers are reverted, an
/// agent staying put keeps its cell), or when two agents would swap. Reverts
/// can create new conflicts, so the rules run to a fixed point.
pub fn resolve_moves(map: &GridMap, positions: &[Cell], actions: &[Action]) -> (Vec<Cell>, Vec<bool>) {
    let n = positions.len();
    let mut target: Vec<Cell> = positions.iter().zip(actions).map(|(&p, a)| a.apply(p)).collect();
    let mut reverted = vec![false; n];
    for i in 0..n {
        if !map.is_free(target[i]) {
            target[i] = positions[i];
            reverted[i] = true;
        }
    }
    let mut count = vec![0u32; map.cell_count()];
    let mut occupant = vec![usize::MAX; map.cell_count()];
    for (i, &p) in positions.iter().enumerate() {
        occupant[map.index(p)] = i;
    }
    let mut losers = Vec::new();
    loop {
        let mut changed = false;
        // vertex conflicts
        for t in &target {
            count[map.index(*t)] += 1;
        }
        losers.clear();
        losers.extend((0..n).filter(|&i| target[i] != positions[i] && count[map.index(target[i])] > 1));
        for t in &target {
            count[map.index(*t)] = 0;
        }
        for &i in &losers {
            target[i] = positions[i];
            reverted[i] = true;
            changed = true;
        }
        // swap conflicts
        for i in 0..n {
            if target[i] == positions[i] {
                continue;
            }
            let j = occupant[map.index(target[i])];
            if j != usize::MAX && j != i && target[j] == positions[i] {
                target[i] = positions[i];
                target[j] = positions[j];
                reverted[i] = true;
                reverted[j] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (target, reverted)
}

/// One decentralized MAPF episode on a static map.
#[derive(Clone, Debug)]
pub struct Env {
    map: GridMap,
    config: EnvConfig,
    agents: Vec<AgentState>,
    goal_distance: Vec<Vec<u32>>,
    step_index: usize,
    finished: bool,
}

impl Env {
    pub fn new(map: GridMap, agents: Vec<AgentState>, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        for (i, a) in agents.iter().enumerate() {
            if !map.is_free(a.pos) || !map.is_free(a.goal) {
                return Err(Error::InvalidMap(alloc::format!("agent {i} start or goal is not a free cell")));
            }
            for b in &agents[..i] {
                if a.pos == b.pos || a.goal == b.goal {
                    return Err(Error::InvalidMap(alloc::format!("agent {i} shares a start or goal with agent {}", b.id)));
                }
            }
        }
        let goal_distance = agents.iter().map(|a| map.bfs(a.goal)).collect();
        let mut agents = agents;
        for (i, a) in agents.iter_mut().enumerate() {
            a.id = i;
            a.memory.clear();
            a.memory.push_back(a.pos);
            a.done = a.at_goal();
        }
        let finished = agents.iter().all(AgentState::at_goal);
        Ok(Self {
            map,
            config,
            agents,
            goal_distance,
            step_index: 0,
            finished,
        })
    }

    /// Builds an episode from explicit `(start, goal)` pairs.
    pub fn from_tasks(map: GridMap, tasks: &[(Cell, Cell)], config: EnvConfig) -> Result<Self> {
        let agents = tasks.iter().enumerate().map(|(i, &(s, g))| AgentState::new(i, s, g)).collect();
        Self::new(map, agents, config)
    }

    pub fn spawn(map: GridMap, n_agents: usize, seed: u64, config: EnvConfig) -> Result<Self> {
        let agents = spawn(&map, n_agents, seed)?;
        Self::new(map, agents, config)
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_done(&self) -> bool {
        self.finished
    }

    pub fn all_at_goal(&self) -> bool {
        self.agents.iter().all(AgentState::at_goal)
    }

    pub fn positions(&self) -> Vec<Cell> {
        self.agents.iter().map(|a| a.pos).collect()
    }

    pub fn goals(&self) -> Vec<Cell> {
        self.agents.iter().map(|a| a.goal).collect()
    }

    /// Static BFS distance from `cell` to agent `id`'s goal.
    pub fn goal_distance(&self, id: usize, cell: Cell) -> u32 {
        if !self.map.in_bounds(cell) {
            return UNREACHABLE;
        }
        self.goal_distance[id][self.map.index(cell)]
    }

    pub fn step(&mut self, joint: &[Action]) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::EpisodeOver);
        }
        if joint.len() != self.agents.len() {
            return Err(Error::JointActionLength {
                expected: self.agents.len(),
                got: joint.len(),
            });
        }
        let positions = self.positions();
        let (next, reverted) = resolve_moves(&self.map, &positions, joint);
        let rewards = self.config.rewards;
        let (eta, fov, capacity) = (self.config.eta, self.config.fov, self.config.memory);
        let mut outcomes = Vec::with_capacity(self.agents.len());
        for (i, agent) in self.agents.iter_mut().enumerate() {
            agent.pos = next[i];
            let extrinsic = if reverted[i] {
                rewards.collision
            } else if joint[i] != Action::Stay {
                rewards.move_cost
            } else if agent.at_goal() {
                rewards.goal
            } else {
                rewards.idle_cost
            };
            let intrinsic = intrinsic_reward(agent, eta, fov);
            agent.last_min_distance = memory_distance(agent.pos, &agent.memory).unwrap_or(0.0);
            agent.memory.push_back(agent.pos);
            while agent.memory.len() > capacity {
                agent.memory.pop_front();
            }
            agent.last_action = joint[i];
            agent.last_intrinsic_reward = intrinsic;
            agent.done = agent.at_goal();
            outcomes.push(AgentOutcome {
                pos: agent.pos,
                extrinsic,
                intrinsic,
                collision: reverted[i],
                blocking: false,
            });
        }
        let blocking = self.blocking_flags();
        for (i, out) in outcomes.iter_mut().enumerate() {
            if blocking[i] {
                out.blocking = true;
                out.extrinsic += rewards.blocking;
            }
            self.agents[i].last_extrinsic_reward = out.extrinsic;
        }
        self.step_index += 1;
        self.finished = self.all_at_goal() || self.step_index >= self.config.max_steps;
        Ok(StepOutcome {
            agents: outcomes,
            episode_done: self.finished,
            step_index: self.step_index,
        })
    }

    pub fn intrinsic_reward(&self, id: usize) -> f64 {
        intrinsic_reward(&self.agents[id], self.config.eta, self.config.fov)
    }

    pub fn manhattan_matrix(&self) -> Vec<Vec<u32>> {
        manhattan_matrix(&self.positions())
    }

    /// Agent `i` is blocking when some other agent `j` that is not on its
    /// goal and lies inside `i`'s field of view has a strictly shorter path
    /// to its goal once `i` is removed. Paths treat every other agent as a
    /// temporary obstacle.
    pub fn blocking_flags(&self) -> Vec<bool> {
        let n = self.agents.len();
        let radius = (self.config.fov / 2) as i32;
        let mut occupied = vec![usize::MAX; self.map.cell_count()];
        for (i, a) in self.agents.iter().enumerate() {
            occupied[self.map.index(a.pos)] = i;
        }
        let mut with_all: Vec<Option<u32>> = vec![None; n];
        let mut flags = vec![false; n];
        for i in 0..n {
            let pi = self.agents[i].pos;
            for j in 0..n {
                let aj = &self.agents[j];
                if j == i || aj.at_goal() {
                    continue;
                }
                if (aj.pos.x - pi.x).abs() > radius || (aj.pos.y - pi.y).abs() > radius {
                    continue;
                }
                let base = *with_all[j].get_or_insert_with(|| {
                    self.map.shortest_distance(aj.pos, aj.goal, |c| {
                        let o = occupied[self.map.index(c)];
                        o != usize::MAX && o != j
                    })
                });
                let without = self.map.shortest_distance(aj.pos, aj.goal, |c| {
                    let o = occupied[self.map.index(c)];
                    o != usize::MAX && o != j && o != i
                });
                if without < base {
                    flags[i] = true;
                    break;
                }
            }
        }
        flags
    }
}

/// Pairwise Manhattan distances between `positions`.
pub fn manhattan_matrix(positions: &[Cell]) -> Vec<Vec<u32>> {
    positions
        .iter()
        .map(|a| positions.iter().map(|&b| a.manhattan(b)).collect())
        .collect()
}
