//! Episode traces as JSON lines.
//!
//! The first line is a `header` record describing the instance; every
//! following line is a `step` record with the joint action and its outcome.
//! A trace holds enough to rebuild the environment and replay the episode.

use std::path::Path;

use rmha_core::{Action, Cell, Env, EnvConfig, GridMap};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_file, BenchError, Result};
use crate::instance::Instance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub solver: String,
    pub seed: u64,
    pub instance_hash: String,
    pub width: usize,
    pub height: usize,
    pub obstacles: Vec<[i32; 2]>,
    pub starts: Vec<[i32; 2]>,
    pub goals: Vec<[i32; 2]>,
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Index of the step; positions are those after it.
    pub t: usize,
    pub actions: Vec<usize>,
    pub positions: Vec<[i32; 2]>,
    pub rewards: Vec<f64>,
    pub collisions: Vec<bool>,
    pub blocking: Vec<bool>,
    pub at_goal: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record {
    Header(Header),
    Step(Step),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub header: Header,
    pub steps: Vec<Step>,
}

pub fn pair(c: Cell) -> [i32; 2] {
    [c.x, c.y]
}

pub fn cell(p: [i32; 2]) -> Cell {
    Cell::new(p[0], p[1])
}

impl Trace {
    pub fn new(solver: &str, seed: u64, instance: &Instance, max_steps: usize) -> Self {
        let map = &instance.map;
        let obstacles = (0..map.cell_count())
            .map(|i| map.cell_at(i))
            .filter(|&c| !map.is_free(c))
            .map(pair)
            .collect();
        Self {
            header: Header {
                solver: solver.to_string(),
                seed,
                instance_hash: instance.hash(),
                width: map.width(),
                height: map.height(),
                obstacles,
                starts: instance.tasks.iter().map(|t| pair(t.0)).collect(),
                goals: instance.tasks.iter().map(|t| pair(t.1)).collect(),
                max_steps,
            },
            steps: Vec::new(),
        }
    }

    pub fn agents(&self) -> usize {
        self.header.starts.len()
    }

    pub fn map(&self) -> Result<GridMap> {
        let h = &self.header;
        let mut occupancy = vec![false; h.width * h.height];
        for &[x, y] in &h.obstacles {
            if x < 0 || y < 0 || x as usize >= h.width || y as usize >= h.height {
                return Err(BenchError::format("trace", format!("obstacle ({x}, {y}) outside the map")));
            }
            occupancy[y as usize * h.width + x as usize] = true;
        }
        Ok(GridMap::new(h.width, h.height, occupancy, 0)?)
    }

    pub fn instance(&self) -> Result<Instance> {
        let tasks = self.header.starts.iter().zip(&self.header.goals).map(|(&s, &g)| (cell(s), cell(g))).collect();
        Ok(Instance { map: self.map()?, tasks })
    }

    /// Positions after step `t` (`t = 0` is the start).
    pub fn positions_at(&self, t: usize) -> Vec<Cell> {
        if t == 0 {
            return self.header.starts.iter().copied().map(cell).collect();
        }
        let step = &self.steps[(t - 1).min(self.steps.len() - 1)];
        step.positions.iter().copied().map(cell).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Record::Header(self.header.clone())).expect("serializable");
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&Record::Step(s.clone())).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header = match lines.next() {
            Some((i, line)) => match serde_json::from_str(line) {
                Ok(Record::Header(h)) => h,
                Ok(Record::Step(_)) => return Err(BenchError::format(origin, "first record is not a header")),
                Err(e) => return Err(BenchError::format(origin, format!("line {}: {e}", i + 1))),
            },
            None => return Err(BenchError::format(origin, "empty trace")),
        };
        if header.goals.len() != header.starts.len() {
            return Err(BenchError::format(origin, "header has different numbers of starts and goals"));
        }
        let n = header.starts.len();
        let mut steps = Vec::new();
        for (i, line) in lines {
            let step = match serde_json::from_str(line) {
                Ok(Record::Step(s)) => s,
                Ok(Record::Header(_)) => return Err(BenchError::format(origin, format!("line {}: second header", i + 1))),
                Err(e) => return Err(BenchError::format(origin, format!("line {}: {e}", i + 1))),
            };
            let lens = [step.actions.len(), step.positions.len(), step.rewards.len(), step.collisions.len(), step.blocking.len(), step.at_goal.len()];
            if lens.iter().any(|&l| l != n) || step.t != steps.len() {
                return Err(BenchError::format(origin, format!("line {}: malformed step record", i + 1)));
            }
            steps.push(step);
        }
        Ok(Self { header, steps })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl())
    }
}

/// Runs one episode, asking `policy` for a joint action at every step, and
/// records it.
pub fn record_episode(
    solver: &str,
    seed: u64,
    instance: &Instance,
    config: EnvConfig,
    policy: &mut dyn FnMut(&Env) -> Result<Vec<Action>>,
) -> Result<Trace> {
    let mut trace = Trace::new(solver, seed, instance, config.max_steps);
    let mut env = Env::from_tasks(instance.map.clone(), &instance.tasks, config)?;
    while !env.is_done() {
        let actions = policy(&env)?;
        let outcome = env.step(&actions)?;
        trace.steps.push(Step {
            t: trace.steps.len(),
            actions: actions.iter().map(|a| a.index()).collect(),
            positions: outcome.agents.iter().map(|a| pair(a.pos)).collect(),
            rewards: outcome.agents.iter().map(|a| a.extrinsic).collect(),
            collisions: outcome.agents.iter().map(|a| a.collision).collect(),
            blocking: outcome.agents.iter().map(|a| a.blocking).collect(),
            at_goal: env.agents().iter().map(|a| a.at_goal()).collect(),
        });
    }
    Ok(trace)
}
