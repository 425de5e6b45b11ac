//! Evaluation campaigns: every solver runs on the same seeded instances.
//!
//! Outputs, all keyed by setting, episode and solver so that worker
//! scheduling never changes them:
//!
//! * `episodes.csv`: one row per episode and solver;
//! * `metrics.csv`: per setting and solver, means with bootstrap 95% intervals;
//! * `deltas.csv`: pairwise success-rate differences, absolute and relative;
//! * `traces/<solver>/<setting>_e<episode>.jsonl`: the retained traces.

use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use rmha_core::EnvConfig;
use serde::{Deserialize, Serialize};

use crate::config::CampaignSection;
use crate::error::{write_file, BenchError, Result};
use crate::instance::Instance;
use crate::metrics::{aggregate, EpisodeMetrics, MetricsRow};
use crate::solver::Solver;
use crate::trace::Trace;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Setting {
    pub size: usize,
    pub density: f64,
    pub agents: usize,
}

impl Setting {
    pub fn id(&self) -> String {
        format!("s{}_d{:.2}_a{}", self.size, self.density, self.agents)
    }
}

#[derive(Clone, Debug)]
pub struct Campaign {
    pub sizes: Vec<usize>,
    pub densities: Vec<f64>,
    pub agents: Vec<usize>,
    pub episodes: usize,
    pub seed_base: u64,
    pub solvers: Vec<Solver>,
    pub env: EnvConfig,
}

impl Campaign {
    pub fn from_section(section: &CampaignSection, env: EnvConfig, solvers: Vec<Solver>) -> Self {
        Self {
            sizes: section.sizes.clone(),
            densities: section.densities.clone(),
            agents: section.agents.clone(),
            episodes: section.episodes,
            seed_base: section.seed_base,
            solvers,
            env,
        }
    }

    /// Planners with the section's budgets.
    pub fn planners(section: &CampaignSection) -> Vec<Solver> {
        vec![
            Solver::Cbs {
                max_expansions: section.cbs_max_expansions,
                timeout: Some(Duration::from_millis(section.cbs_timeout_ms)),
            },
            Solver::CaStar,
        ]
    }

    pub fn settings(&self) -> Vec<Setting> {
        let mut out = Vec::new();
        for &size in &self.sizes {
            for &density in &self.densities {
                for &agents in &self.agents {
                    out.push(Setting { size, density, agents });
                }
            }
        }
        out
    }

    /// Seed of one episode's instance; independent of the solver.
    pub fn instance_seed(&self, setting: usize, episode: usize) -> u64 {
        splitmix(splitmix(self.seed_base ^ (setting as u64) << 32) ^ episode as u64)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub setting: String,
    pub size: usize,
    pub density: f64,
    pub agents: usize,
    pub episode: usize,
    pub seed: u64,
    pub solver: String,
    pub instance_hash: String,
    pub success: bool,
    pub max_at_goal: usize,
    pub collisions: usize,
    pub steps: usize,
    pub collision_rate: f64,
    pub makespan: Option<usize>,
    pub soc: Option<usize>,
    /// Planner optimality flag; empty for learned policies.
    pub optimal: Option<bool>,
    /// Why the episode could not run; empty otherwise.
    pub error: String,
}

impl EpisodeRow {
    pub fn metrics(&self) -> EpisodeMetrics {
        EpisodeMetrics {
            success: self.success,
            max_at_goal: self.max_at_goal,
            collisions: self.collisions,
            steps: self.steps,
            agents: self.agents,
            collision_rate: self.collision_rate,
            makespan: self.makespan,
            soc: self.soc,
        }
    }

    pub fn trace_path(&self) -> String {
        format!("traces/{}/{}_e{}.jsonl", self.solver, self.setting, self.episode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub setting: String,
    pub solver_a: String,
    pub solver_b: String,
    /// `sr_a - sr_b` in percentage points.
    pub sr_delta: f64,
    /// `(sr_a - sr_b) / sr_b` in percent; empty when `sr_b` is zero.
    pub sr_relative: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CampaignResult {
    pub episodes: Vec<EpisodeRow>,
    pub metrics: Vec<MetricsRow>,
    pub deltas: Vec<DeltaRow>,
    pub traces: Vec<(String, Trace)>,
}

/// Runs the campaign on the rayon pool. Per-episode failures become failed
/// rows and never abort the campaign.
pub fn run_campaign(campaign: &Campaign) -> Result<CampaignResult> {
    if campaign.episodes == 0 || campaign.solvers.is_empty() {
        return Err(BenchError::Config("a campaign needs at least one episode and one solver".into()));
    }
    let settings = campaign.settings();
    let jobs: Vec<(usize, usize)> = (0..settings.len()).flat_map(|s| (0..campaign.episodes).map(move |e| (s, e))).collect();
    type JobResult = ((usize, usize), Vec<(EpisodeRow, Option<Trace>)>);
    let mut results: Vec<JobResult> = jobs
        .par_iter()
        .map(|&(s, e)| ((s, e), run_job(campaign, s, settings[s], e)))
        .collect();
    results.sort_by_key(|r| r.0);

    let mut episodes = Vec::new();
    let mut traces = Vec::new();
    for (_, rows) in results {
        for (row, trace) in rows {
            if let Some(trace) = trace {
                traces.push((row.trace_path(), trace));
            }
            episodes.push(row);
        }
    }
    let metrics = metrics_table(&settings, &campaign.solvers.iter().map(|s| s.name().to_string()).collect::<Vec<_>>(), &episodes, campaign.seed_base)?;
    let deltas = delta_table(&metrics);
    Ok(CampaignResult {
        episodes,
        metrics,
        deltas,
        traces,
    })
}

fn run_job(campaign: &Campaign, s: usize, setting: Setting, e: usize) -> Vec<(EpisodeRow, Option<Trace>)> {
    let seed = campaign.instance_seed(s, e);
    let instance = Instance::generate(setting.size, setting.density, setting.agents, seed);
    campaign
        .solvers
        .iter()
        .map(|solver| {
            let mut row = EpisodeRow {
                setting: setting.id(),
                size: setting.size,
                density: setting.density,
                agents: setting.agents,
                episode: e,
                seed,
                solver: solver.name().to_string(),
                instance_hash: String::new(),
                success: false,
                max_at_goal: 0,
                collisions: 0,
                steps: 0,
                collision_rate: 0.0,
                makespan: None,
                soc: None,
                optimal: None,
                error: String::new(),
            };
            let instance = match &instance {
                Ok(i) => i,
                Err(err) => {
                    row.error = err.to_string();
                    return (row, None);
                }
            };
            row.instance_hash = instance.hash();
            match solver.run(instance, seed, campaign.env) {
                Ok(run) => {
                    let m = EpisodeMetrics::from_trace(&run.trace);
                    row.success = m.success;
                    row.max_at_goal = m.max_at_goal;
                    row.collisions = m.collisions;
                    row.steps = m.steps;
                    row.collision_rate = m.collision_rate;
                    row.makespan = m.makespan;
                    row.soc = m.soc;
                    row.optimal = run.plan.map(|p| p.optimal);
                    (row, Some(run.trace))
                }
                Err(err) => {
                    row.error = err.to_string();
                    (row, None)
                }
            }
        })
        .collect()
}

/// Aggregates episode rows per setting and solver, in campaign order.
pub fn metrics_table(settings: &[Setting], solvers: &[String], episodes: &[EpisodeRow], seed_base: u64) -> Result<Vec<MetricsRow>> {
    let mut out = Vec::new();
    for (k, setting) in settings.iter().enumerate() {
        let id = setting.id();
        for (j, solver) in solvers.iter().enumerate() {
            let cell: Vec<EpisodeMetrics> = episodes
                .iter()
                .filter(|r| r.setting == id && &r.solver == solver)
                .map(EpisodeRow::metrics)
                .collect();
            let ci_seed = splitmix(seed_base ^ ((k as u64) << 16) ^ j as u64);
            out.push(aggregate(setting.size, setting.density, setting.agents, solver, &cell, ci_seed)?);
        }
    }
    Ok(out)
}

pub fn delta_table(metrics: &[MetricsRow]) -> Vec<DeltaRow> {
    let mut out = Vec::new();
    for (i, a) in metrics.iter().enumerate() {
        for b in &metrics[i + 1..] {
            if (a.size, a.agents) != (b.size, b.agents) || a.density != b.density {
                continue;
            }
            out.push(DeltaRow {
                setting: Setting {
                    size: a.size,
                    density: a.density,
                    agents: a.agents,
                }
                .id(),
                solver_a: a.solver.clone(),
                solver_b: b.solver.clone(),
                sr_delta: a.sr - b.sr,
                sr_relative: (b.sr > 0.0).then(|| 100.0 * (a.sr - b.sr) / b.sr),
            });
        }
    }
    out
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| BenchError::format(path.display(), e.to_string()))?;
    reader.deserialize().map(|r| r.map_err(BenchError::from)).collect()
}

impl CampaignResult {
    pub fn write(&self, out: &Path) -> Result<()> {
        write_file(&out.join("episodes.csv"), to_csv(&self.episodes)?)?;
        write_file(&out.join("metrics.csv"), to_csv(&self.metrics)?)?;
        write_file(&out.join("deltas.csv"), to_csv(&self.deltas)?)?;
        for (rel, trace) in &self.traces {
            trace.write(&out.join(rel))?;
        }
        Ok(())
    }
}
