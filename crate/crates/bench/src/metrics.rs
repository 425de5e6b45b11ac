//! Episode metrics and bootstrap aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::trace::Trace;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    /// Most agents simultaneously on their goals.
    pub max_at_goal: usize,
    pub collisions: usize,
    pub steps: usize,
    pub agents: usize,
    /// Collision events over `steps * agents`.
    pub collision_rate: f64,
    /// Only for successful episodes.
    pub makespan: Option<usize>,
    pub soc: Option<usize>,
}

impl EpisodeMetrics {
    pub fn from_trace(trace: &Trace) -> Self {
        let n = trace.agents();
        let steps = trace.steps.len();
        let initial: Vec<bool> = trace.header.starts.iter().zip(&trace.header.goals).map(|(s, g)| s == g).collect();
        let mut timeline = vec![initial];
        timeline.extend(trace.steps.iter().map(|s| s.at_goal.clone()));
        let collisions = trace.steps.iter().map(|s| s.collisions.iter().filter(|&&c| c).count()).sum();
        let max_at_goal = timeline.iter().map(|row| row.iter().filter(|&&g| g).count()).max().unwrap_or(0);
        let finished = timeline.last().is_some_and(|row| row.iter().all(|&g| g));
        let success = finished && collisions == 0;
        let (makespan, soc) = if success {
            // Arrival time: first index after which the agent never leaves its goal.
            let arrivals: Vec<usize> = (0..n)
                .map(|i| (0..timeline.len()).rev().find(|&t| !timeline[t][i]).map_or(0, |t| t + 1))
                .collect();
            (arrivals.iter().copied().max().or(Some(0)), Some(arrivals.iter().sum()))
        } else {
            (None, None)
        };
        Self {
            success,
            max_at_goal,
            collisions,
            steps,
            agents: n,
            collision_rate: if steps == 0 || n == 0 { 0.0 } else { collisions as f64 / (steps * n) as f64 },
            makespan,
            soc,
        }
    }

    /// An episode that never ran (generation or planning failed).
    pub fn failed(agents: usize) -> Self {
        Self {
            success: false,
            max_at_goal: 0,
            collisions: 0,
            steps: 0,
            agents,
            collision_rate: 0.0,
            makespan: None,
            soc: None,
        }
    }
}

/// Success rate in percent.
pub fn success_rate(episodes: &[EpisodeMetrics]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(BenchError::Empty("success rate of zero episodes"));
    }
    Ok(100.0 * episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, rng: &mut impl Rng) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some((pick(0.025), pick(0.975)))
}

/// Mean with its interval; all `None` when there are no values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Estimate {
    pub mean: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl Estimate {
    pub fn of(values: &[f64], rng: &mut impl Rng) -> Self {
        let ci = bootstrap_ci(values, BOOTSTRAP_RESAMPLES, rng);
        Self {
            mean: mean(values),
            lo: ci.map(|c| c.0),
            hi: ci.map(|c| c.1),
        }
    }

    pub fn width(&self) -> Option<f64> {
        Some(self.hi? - self.lo?)
    }
}

/// Aggregate of one (setting, solver) cell of a campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub size: usize,
    pub density: f64,
    pub agents: usize,
    pub solver: String,
    pub episodes: usize,
    pub sr: f64,
    pub sr_lo: f64,
    pub sr_hi: f64,
    pub mr: f64,
    pub mr_lo: f64,
    pub mr_hi: f64,
    pub co: f64,
    pub co_lo: f64,
    pub co_hi: f64,
    pub makespan: Option<f64>,
    pub makespan_lo: Option<f64>,
    pub makespan_hi: Option<f64>,
    pub soc: Option<f64>,
    pub soc_lo: Option<f64>,
    pub soc_hi: Option<f64>,
}

/// Aggregates episodes; the bootstrap generator is seeded by `ci_seed` so the
/// table is reproducible.
pub fn aggregate(size: usize, density: f64, agents: usize, solver: &str, episodes: &[EpisodeMetrics], ci_seed: u64) -> Result<MetricsRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(ci_seed);
    let sr_values: Vec<f64> = episodes.iter().map(|e| if e.success { 100.0 } else { 0.0 }).collect();
    let mr_values: Vec<f64> = episodes.iter().map(|e| e.max_at_goal as f64).collect();
    let co_values: Vec<f64> = episodes.iter().map(|e| e.collision_rate).collect();
    let ms_values: Vec<f64> = episodes.iter().filter_map(|e| e.makespan).map(|v| v as f64).collect();
    let soc_values: Vec<f64> = episodes.iter().filter_map(|e| e.soc).map(|v| v as f64).collect();
    let sr = Estimate::of(&sr_values, &mut rng);
    let mr = Estimate::of(&mr_values, &mut rng);
    let co = Estimate::of(&co_values, &mut rng);
    let ms = Estimate::of(&ms_values, &mut rng);
    let soc = Estimate::of(&soc_values, &mut rng);
    let required = |e: Estimate| -> Result<(f64, f64, f64)> {
        match (e.mean, e.lo, e.hi) {
            (Some(m), Some(l), Some(h)) => Ok((m, l, h)),
            _ => Err(BenchError::Empty("metrics of zero episodes")),
        }
    };
    let (sr_m, sr_lo, sr_hi) = required(sr)?;
    let (mr_m, mr_lo, mr_hi) = required(mr)?;
    let (co_m, co_lo, co_hi) = required(co)?;
    debug_assert!((success_rate(episodes)? - sr_m).abs() < 1e-9);
    Ok(MetricsRow {
        size,
        density,
        agents,
        solver: solver.to_string(),
        episodes: episodes.len(),
        sr: sr_m,
        sr_lo,
        sr_hi,
        mr: mr_m,
        mr_lo,
        mr_hi,
        co: co_m,
        co_lo,
        co_hi,
        makespan: ms.mean,
        makespan_lo: ms.lo,
        makespan_hi: ms.hi,
        soc: soc.mean,
        soc_lo: soc.lo,
        soc_hi: soc.hi,
    })
}
