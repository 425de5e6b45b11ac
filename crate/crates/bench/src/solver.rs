//! Uniform episode runners for planners and learned policies.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmha_core::baselines::{cbs_until, cooperative_astar, Solution};
use rmha_core::mappo::{decide, AgentMemory};
use rmha_core::policy_net::Model;
use rmha_core::{Action, Env, EnvConfig};

use crate::error::{BenchError, Result};
use crate::instance::Instance;
use crate::trace::{record_episode, Trace};

#[derive(Clone, Debug)]
pub enum Solver {
    Cbs {
        max_expansions: usize,
        /// Wall-clock budget; `None` relies on the expansion cap alone.
        timeout: Option<Duration>,
    },
    CaStar,
    Policy {
        name: String,
        model: Arc<Model>,
        greedy: bool,
    },
}

/// A planner's output before execution.
#[derive(Clone, Debug)]
pub struct Plan {
    pub solution: Solution,
    pub optimal: bool,
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct EpisodeRun {
    pub trace: Trace,
    pub plan: Option<Plan>,
}

impl Solver {
    pub fn name(&self) -> &str {
        match self {
            Solver::Cbs { .. } => "cbs",
            Solver::CaStar => "ca_star",
            Solver::Policy { name, .. } => name,
        }
    }

    /// Plans without executing; `None` for learned policies.
    pub fn plan(&self, instance: &Instance) -> Option<Result<Plan>> {
        let start = Instant::now();
        let result = match self {
            Solver::Cbs { max_expansions, timeout } => {
                let deadline = timeout.map(|t| start + t);
                let mut stop = || deadline.is_some_and(|d| Instant::now() >= d);
                cbs_until(&instance.map, &instance.tasks, *max_expansions, &mut stop)
                    .map_err(BenchError::from)
                    .and_then(|out| match out.solution {
                        Some(solution) => Ok((solution, out.optimal)),
                        None => Err(BenchError::Unsolved { expanded: out.expanded }),
                    })
            }
            Solver::CaStar => {
                let order: Vec<usize> = (0..instance.tasks.len()).collect();
                cooperative_astar(&instance.map, &instance.tasks, &order)
                    .map(|s| (s, false))
                    .map_err(BenchError::from)
            }
            Solver::Policy { .. } => return None,
        };
        Some(result.map(|(solution, optimal)| Plan {
            solution,
            optimal,
            wall_time: start.elapsed(),
        }))
    }

    /// Runs one episode in the simulator and records it.
    pub fn run(&self, instance: &Instance, seed: u64, config: EnvConfig) -> Result<EpisodeRun> {
        match self {
            Solver::Policy { model, greedy, .. } => {
                let trace = run_policy(self.name(), model, *greedy, instance, seed, config)?;
                Ok(EpisodeRun { trace, plan: None })
            }
            _ => {
                let plan = self.plan(instance).expect("planner")?;
                let trace = execute_plan(self.name(), &plan.solution, instance, seed, config)?;
                Ok(EpisodeRun { trace, plan: Some(plan) })
            }
        }
    }
}

/// Executes a planned solution, waiting in place once it is exhausted.
pub fn execute_plan(name: &str, solution: &Solution, instance: &Instance, seed: u64, config: EnvConfig) -> Result<Trace> {
    let mut policy = |env: &Env| -> Result<Vec<Action>> { Ok(solution.joint_action(env.step_index())) };
    record_episode(name, seed, instance, config, &mut policy)
}

/// Runs a learned policy with value-based conflict resolution. Sampling is
/// seeded by `seed`.
pub fn run_policy(name: &str, model: &Model, greedy: bool, instance: &Instance, seed: u64, config: EnvConfig) -> Result<Trace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut memory = AgentMemory::new(model, instance.tasks.len());
    let mut policy = |env: &Env| -> Result<Vec<Action>> {
        let d = decide(model, env, &memory, &mut rng, greedy, true)?;
        memory.advance(&d.output);
        Ok(d.actions)
    };
    record_episode(name, seed, instance, config, &mut policy)
}
