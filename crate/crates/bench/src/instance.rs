//! Seeded MAPF instances and the per-agent scenario CSV.

use std::path::Path;

use rmha_core::grid_world::{generate_map, spawn, Triangular};
use rmha_core::{Cell, GridMap};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_to_string, write_file, BenchError, Result};
use crate::movingai::format_map;

/// A map plus one `(start, goal)` pair per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub map: GridMap,
    pub tasks: Vec<(Cell, Cell)>,
}

impl Instance {
    /// Square `size` map with fixed obstacle probability `density`; starts and
    /// goals drawn from the largest free region. Everything follows from `seed`.
    pub fn generate(size: usize, density: f64, agents: usize, seed: u64) -> Result<Self> {
        let map = generate_map(size, size, Triangular::fixed(density)?, seed, 2 * agents)?;
        let tasks = spawn(&map, agents, seed ^ 0x5eed_5eed_5eed_5eed)?
            .into_iter()
            .map(|a| (a.pos, a.goal))
            .collect();
        Ok(Self { map, tasks })
    }

    /// The two-agent corridor with a single side bay:
    ///
    /// ```text
    /// @@.@@
    /// .....
    /// ```
    ///
    /// Agent 0 walks left to right along the bottom row and agent 1 walks the
    /// other way, so one of them has to step into the bay and let the other pass.
    pub fn corridor() -> Self {
        let map = GridMap::from_rows(&["@@.@@", "....."]).expect("static map");
        let tasks = vec![(Cell::new(0, 1), Cell::new(4, 1)), (Cell::new(4, 1), Cell::new(0, 1))];
        Self { map, tasks }
    }

    /// Short content hash: identical for identical maps and tasks.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format_map(&self.map).as_bytes());
        h.update(format_scenario(&self.tasks).as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        crate::checkpoint::hex(&digest[..8])
    }
}

#[derive(Serialize, Deserialize)]
struct ScenarioRow {
    agent_id: usize,
    start_x: i32,
    start_y: i32,
    goal_x: i32,
    goal_y: i32,
}

pub fn format_scenario(tasks: &[(Cell, Cell)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (agent_id, &(s, g)) in tasks.iter().enumerate() {
        w.serialize(ScenarioRow {
            agent_id,
            start_x: s.x,
            start_y: s.y,
            goal_x: g.x,
            goal_y: g.y,
        })
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// Parses the scenario CSV. Rows must list agents `0..n` in order.
pub fn parse_scenario(text: &str, origin: &str) -> Result<Vec<(Cell, Cell)>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut tasks = Vec::new();
    for row in reader.deserialize::<ScenarioRow>() {
        let row = row.map_err(|e| BenchError::format(origin, e.to_string()))?;
        if row.agent_id != tasks.len() {
            return Err(BenchError::format(
                origin,
                format!("agent ids must run 0..n in order, found {} at row {}", row.agent_id, tasks.len()),
            ));
        }
        tasks.push((Cell::new(row.start_x, row.start_y), Cell::new(row.goal_x, row.goal_y)));
    }
    Ok(tasks)
}

/// Checks that every start and goal is a distinct free cell.
pub fn validate_tasks(map: &GridMap, tasks: &[(Cell, Cell)], origin: &str) -> Result<()> {
    for (i, &(s, g)) in tasks.iter().enumerate() {
        for c in [s, g] {
            if !map.is_free(c) {
                return Err(BenchError::format(origin, format!("agent {i}: cell ({}, {}) is not free", c.x, c.y)));
            }
        }
    }
    let mut starts: Vec<Cell> = tasks.iter().map(|t| t.0).collect();
    let mut goals: Vec<Cell> = tasks.iter().map(|t| t.1).collect();
    starts.sort();
    goals.sort();
    if starts.windows(2).any(|w| w[0] == w[1]) || goals.windows(2).any(|w| w[0] == w[1]) {
        return Err(BenchError::format(origin, "two agents share a start or a goal"));
    }
    Ok(())
}

pub fn read_scenario(path: &Path) -> Result<Vec<(Cell, Cell)>> {
    parse_scenario(&read_to_string(path)?, &path.display().to_string())
}

pub fn write_scenario(path: &Path, tasks: &[(Cell, Cell)]) -> Result<()> {
    write_file(path, format_scenario(tasks))
}

/// Loads a map and scenario pair and checks they fit together.
pub fn read_instance(map_path: &Path, scenario_path: &Path) -> Result<Instance> {
    let map = crate::movingai::read_map(map_path)?;
    let tasks = read_scenario(scenario_path)?;
    validate_tasks(&map, &tasks, &scenario_path.display().to_string())?;
    Ok(Instance { map, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let a = Instance::generate(10, 0.3, 8, 42).unwrap();
        let b = Instance::generate(10, 0.3, 8, 42).unwrap();
        let c = Instance::generate(10, 0.3, 8, 43).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        validate_tasks(&a.map, &a.tasks, "t").unwrap();
    }

    #[test]
    fn scenario_round_trip() {
        let tasks = Instance::corridor().tasks;
        let text = format_scenario(&tasks);
        assert!(text.starts_with("agent_id,start_x,start_y,goal_x,goal_y\n0,0,1,4,1\n"));
        assert_eq!(parse_scenario(&text, "t").unwrap(), tasks);
    }

    #[test]
    fn out_of_order_ids_are_rejected() {
        let text = "agent_id,start_x,start_y,goal_x,goal_y\n1,0,0,1,1\n";
        assert!(parse_scenario(text, "t").is_err());
    }

    #[test]
    fn obstacle_start_is_rejected() {
        let c = Instance::corridor();
        let tasks = [(Cell::new(0, 0), Cell::new(4, 1))];
        assert!(validate_tasks(&c.map, &tasks, "t").is_err());
    }
}
