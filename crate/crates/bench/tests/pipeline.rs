use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmha_bench::campaign::{run_campaign, Campaign, CampaignResult};
use rmha_bench::metrics::Estimate;
use rmha_bench::solver::Solver;
use rmha_bench::trace::{cell, Trace};
use rmha_core::policy_net::{Model, ModelConfig};
use rmha_core::rmha_comm::CommMode;
use rmha_core::{Action, Env, EnvConfig};

fn campaign(agents: Vec<usize>, episodes: usize, with_policy: bool) -> Campaign {
    let mut solvers = vec![Solver::Cbs { max_expansions: 50_000, timeout: None }, Solver::CaStar];
    if with_policy {
        let model = Model::new(ModelConfig::desk(CommMode::Rmha), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        solvers.push(Solver::Policy {
            name: "rmha".into(),
            model: Arc::new(model),
            greedy: false,
        });
    }
    Campaign {
        sizes: vec![5],
        densities: vec![0.0, 0.15],
        agents,
        episodes,
        seed_base: 11,
        solvers,
        env: EnvConfig { max_steps: 64, ..EnvConfig::default() },
    }
}

/// Replays the recorded actions in a fresh simulator and recomputes the
/// episode summary without the harness's metric code.
fn replayed_summary(trace: &Trace) -> (bool, usize, usize, Option<usize>, Option<usize>) {
    let inst = trace.instance().unwrap();
    let config = EnvConfig { max_steps: trace.header.max_steps, ..EnvConfig::default() };
    let mut env = Env::from_tasks(inst.map.clone(), &inst.tasks, config).unwrap();
    let goals: Vec<_> = inst.tasks.iter().map(|t| t.1).collect();
    let mut at_goal_history = vec![env.positions().iter().zip(&goals).map(|(p, g)| p == g).collect::<Vec<_>>()];
    let mut collisions = 0;
    for step in &trace.steps {
        let actions: Vec<Action> = step.actions.iter().map(|&a| Action::ALL[a]).collect();
        let out = env.step(&actions).unwrap();
        collisions += out.agents.iter().filter(|a| a.collision).count();
        let pos = env.positions();
        assert_eq!(pos, step.positions.iter().map(|&p| cell(p)).collect::<Vec<_>>());
        at_goal_history.push(pos.iter().zip(&goals).map(|(p, g)| p == g).collect());
    }
    let max_at_goal = at_goal_history.iter().map(|r| r.iter().filter(|&&b| b).count()).max().unwrap();
    let success = collisions == 0 && at_goal_history.last().unwrap().iter().all(|&b| b);
    if !success {
        return (false, max_at_goal, collisions, None, None);
    }
    let mut arrivals = vec![0usize; goals.len()];
    for (t, row) in at_goal_history.iter().enumerate() {
        for (i, &here) in row.iter().enumerate() {
            if !here {
                arrivals[i] = t + 1;
            }
        }
    }
    (true, max_at_goal, collisions, arrivals.iter().max().copied(), Some(arrivals.iter().sum()))
}

fn traces_by_path(result: &CampaignResult) -> HashMap<&str, &Trace> {
    result.traces.iter().map(|(p, t)| (p.as_str(), t)).collect()
}

#[test]
fn harness_metrics_match_independent_replay() {
    let result = run_campaign(&campaign(vec![2, 3], 6, true)).unwrap();
    let traces = traces_by_path(&result);
    assert_eq!(result.episodes.len(), 2 * 2 * 6 * 3);
    for row in &result.episodes {
        assert!(row.error.is_empty(), "{}", row.error);
        let trace = traces[row.trace_path().as_str()];
        let (success, mr, co, makespan, soc) = replayed_summary(trace);
        assert_eq!((row.success, row.max_at_goal, row.collisions), (success, mr, co), "{}", row.trace_path());
        assert_eq!((row.makespan, row.soc), (makespan, soc), "{}", row.trace_path());
        assert_eq!(row.steps, trace.steps.len());
    }
    for m in &result.metrics {
        let rows: Vec<_> = result
            .episodes
            .iter()
            .filter(|r| r.solver == m.solver && r.size == m.size && r.agents == m.agents && r.density == m.density)
            .collect();
        let sr = 100.0 * rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64;
        assert!((m.sr - sr).abs() < 1e-9);
        assert!(m.sr_lo <= m.sr && m.sr <= m.sr_hi);
    }
}

#[test]
fn solvers_share_instances() {
    let result = run_campaign(&campaign(vec![2], 5, true)).unwrap();
    let mut by_key: HashMap<(String, usize), Vec<&str>> = HashMap::new();
    for row in &result.episodes {
        by_key.entry((row.setting.clone(), row.episode)).or_default().push(&row.instance_hash);
    }
    for hashes in by_key.values() {
        assert_eq!(hashes.len(), 3);
        assert!(hashes.iter().all(|h| *h == hashes[0]));
    }
}

#[test]
fn cbs_solves_every_two_agent_instance() {
    let result = run_campaign(&campaign(vec![2], 50, false)).unwrap();
    for m in result.metrics.iter().filter(|m| m.solver == "cbs") {
        assert_eq!((m.sr, m.co), (100.0, 0.0), "{m:?}");
    }
}

#[test]
fn campaigns_are_reproducible() {
    let a = run_campaign(&campaign(vec![2], 4, true)).unwrap();
    let b = run_campaign(&campaign(vec![2], 4, true)).unwrap();
    assert_eq!(a.episodes, b.episodes);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn intervals_narrow_with_more_episodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draws = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| if rng.random_bool(0.6) { 100.0 } else { 0.0 }).collect() };
    let small = draws(100, &mut rng);
    let large = draws(400, &mut rng);
    let w100 = Estimate::of(&small, &mut rng).width().unwrap();
    let w400 = Estimate::of(&large, &mut rng).width().unwrap();
    assert!(w400 < w100, "{w400} vs {w100}");
}

