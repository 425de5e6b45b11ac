//! Planner solutions as JSON.

use std::path::Path as FsPath;

use rmha_core::baselines::{Path, Solution};
use rmha_core::Cell;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_file, BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedCell {
    pub t: usize,
    pub x: i32,
    pub y: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPath {
    pub agent: usize,
    pub cells: Vec<TimedCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub solver: String,
    pub instance_hash: String,
    /// False when the search stopped early and `paths` is a fallback.
    pub optimal: bool,
    pub makespan: usize,
    pub soc: usize,
    /// Left out unless requested, so that repeated runs stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
    pub paths: Vec<AgentPath>,
}

impl SolutionFile {
    pub fn new(solver: &str, instance_hash: &str, solution: &Solution, optimal: bool) -> Self {
        let paths = solution
            .paths
            .iter()
            .enumerate()
            .map(|(agent, p)| AgentPath {
                agent,
                cells: p.cells.iter().enumerate().map(|(t, c)| TimedCell { t, x: c.x, y: c.y }).collect(),
            })
            .collect();
        Self {
            solver: solver.to_string(),
            instance_hash: instance_hash.to_string(),
            optimal,
            makespan: solution.makespan,
            soc: solution.soc,
            wall_time_ms: None,
            paths,
        }
    }

    pub fn solution(&self) -> Result<Solution> {
        let mut paths = Vec::with_capacity(self.paths.len());
        for (i, p) in self.paths.iter().enumerate() {
            if p.agent != i || p.cells.is_empty() || p.cells.iter().enumerate().any(|(t, c)| c.t != t) {
                return Err(BenchError::format("solution", format!("path {i} is not a gapless timed sequence")));
            }
            paths.push(Path {
                cells: p.cells.iter().map(|c| Cell::new(c.x, c.y)).collect(),
            });
        }
        let solution = Solution::new(paths);
        if (solution.makespan, solution.soc) != (self.makespan, self.soc) {
            return Err(BenchError::format("solution", "makespan or soc does not match the paths"));
        }
        Ok(solution)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn read(path: &FsPath) -> Result<Self> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| BenchError::format(path.display(), e.to_string()))
    }

    pub fn write(&self, path: &FsPath) -> Result<()> {
        write_file(path, self.to_json())
    }
}
