//! Multi-agent PPO with a shared policy.
//!
//! Rollouts run a fixed horizon in several environments, advantages come from
//! GAE on two reward streams (extrinsic and intrinsic), and updates use the
//! clipped surrogate objective. At execution time the sampled joint action is
//! passed through a value-based conflict resolver so that the simulator never
//! has to revert a move.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid_world::{generate_map, resolve_moves, Action, Cell, Env, EnvConfig, GridMap, Triangular};
use crate::nn::sigmoid;
use crate::param::{clip_global_norm, Adam};
use crate::policy_net::{HeadGrads, Model, ModelConfig, StepInput, StepOutput, N_ACTIONS};
use crate::rmha_comm::CommMode;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Joint steps (all agents of one env at one time) per minibatch.
    pub minibatch: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub blocking_coef: f64,
    pub max_grad_norm: f64,
    /// Weight of the intrinsic advantage in the combined advantage.
    pub intrinsic_weight: f64,
    pub envs: usize,
    pub horizon: usize,
    pub total_steps: usize,
    /// Episodes in the sliding success-rate window.
    pub sr_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            lr: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            blocking_coef: 0.1,
            max_grad_norm: 0.5,
            intrinsic_weight: 0.5,
            envs: 8,
            horizon: 128,
            total_steps: 200_000,
            sr_window: 100,
        }
    }
}

impl TrainConfig {
    /// Settings for small CPU runs: more epochs and smaller minibatches per
    /// round, a larger step size and no entropy bonus. With the defaults the
    /// novelty reward stream drowns the goal signal on tiny maps.
    pub fn desk() -> Self {
        Self {
            epochs: 8,
            minibatch: 64,
            lr: 1e-3,
            entropy_coef: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.gamma) || !open(self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "gamma and lambda must lie in (0, 1), got {} and {}",
                self.gamma, self.lambda
            )));
        }
        if self.clip <= 0.0 || self.lr <= 0.0 || self.max_grad_norm <= 0.0 {
            return Err(Error::InvalidConfig("clip, lr and max_grad_norm must be positive".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.envs == 0 || self.horizon == 0 || self.sr_window == 0 {
            return Err(Error::InvalidConfig("epochs, minibatch, envs, horizon and sr_window must be nonzero".into()));
        }
        Ok(())
    }

    pub fn steps_per_round(&self) -> usize {
        self.envs * self.horizon
    }

    pub fn rounds(&self) -> usize {
        self.total_steps.div_ceil(self.steps_per_round())
    }
}

/// Map and agent settings from which training episodes are drawn. Each
/// episode gets a square map whose side is uniform in
/// `min_side..=max_side`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskConfig {
    pub min_side: usize,
    pub max_side: usize,
    pub density: Triangular,
    pub agents: usize,
}

impl TaskConfig {
    pub fn empty(side: usize, agents: usize) -> Self {
        Self {
            min_side: side,
            max_side: side,
            density: Triangular { lo: 0.0, peak: 0.0, hi: 0.0 },
            agents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_side < 2 || self.min_side > self.max_side {
            return Err(Error::InvalidConfig(format!(
                "map side range {}..={} is empty or below 2",
                self.min_side, self.max_side
            )));
        }
        if self.agents == 0 {
            return Err(Error::InvalidConfig("at least one agent is needed".into()));
        }
        Ok(())
    }

    /// A fresh episode whose map and spawn seeds are drawn from `rng`.
    pub fn episode<R: Rng + ?Sized>(&self, env: EnvConfig, rng: &mut R) -> Result<Env> {
        let side = rng.random_range(self.min_side..=self.max_side);
        let map_seed = rng.next_u64();
        let spawn_seed = rng.next_u64();
        let map = generate_map(side, side, self.density, map_seed, 2 * self.agents)?;
        Env::spawn(map, self.agents, spawn_seed, env)
    }
}

/// GAE over one trajectory. `dones[t]` marks that the episode ended after
/// step `t`, so nothing is bootstrapped across it; `last_value` bootstraps
/// the step after the final one when that step is not terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
    last_value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::LengthMismatch("rewards and values"));
    }
    if rewards.len() != dones.len() {
        return Err(Error::LengthMismatch("rewards and dones"));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let (next_value, keep) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], 1.0)
        } else {
            (last_value, 1.0)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        carry = delta + gamma * lambda * keep * carry;
        adv[t] = carry;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Clipped surrogate term `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Indices of a pairwise conflict in a proposed joint action: two agents
/// entering one cell (a stayer counts as entering its own cell), or two
/// agents exchanging cells.
fn conflict_pairs(positions: &[Cell], targets: &[Cell]) -> Vec<(usize, usize)> {
    let n = positions.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let vertex = targets[i] == targets[j];
            let swap = targets[i] == positions[j] && targets[j] == positions[i] && targets[i] != positions[i];
            if vertex || swap {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Whether agent `i` taking `a` clashes with anyone else's current plan.
fn action_is_clear(map: &GridMap, positions: &[Cell], targets: &[Cell], i: usize, a: Action) -> bool {
    let t = a.apply(positions[i]);
    if !map.is_free(t) {
        return false;
    }
    (0..positions.len()).filter(|&k| k != i).all(|k| {
        let vertex = targets[k] == t;
        let swap = t == positions[k] && targets[k] == positions[i] && t != positions[i];
        !vertex && !swap
    })
}

/// Draws from `probs` restricted to `allowed`; `None` when nothing allowed has
/// positive mass.
fn sample_restricted<R: Rng + ?Sized>(probs: &[f64; N_ACTIONS], allowed: &[bool; N_ACTIONS], rng: &mut R) -> Option<Action> {
    let total: f64 = (0..N_ACTIONS).filter(|&a| allowed[a]).map(|a| probs[a]).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for a in 0..N_ACTIONS {
        if !allowed[a] || probs[a] <= 0.0 {
            continue;
        }
        last = Some(Action::ALL[a]);
        if u < probs[a] {
            return last;
        }
        u -= probs[a];
    }
    last
}

/// Index drawn from `softmax(values)` at temperature 1.
fn softmax_draw<R: Rng + ?Sized>(values: &[f64], rng: &mut R) -> usize {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = values.iter().map(|v| libm::exp(v - max)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Turns independently sampled actions into a joint action the simulator
/// executes without reverting anyone.
///
/// Moves into walls are re-sampled first. Then, repeatedly, agents in each
/// conflict group compete: an agent that stays put keeps its cell, otherwise
/// the winner is drawn from a softmax over the members' extrinsic values.
/// Losers re-sample from their policy restricted to actions that clash with
/// nobody, falling back to Stay. After at most `n` rounds any remaining
/// conflict is settled the way the simulator would settle it, with the
/// affected agents staying.
pub fn act_with_conflict_resolution<R: Rng + ?Sized>(
    map: &GridMap,
    positions: &[Cell],
    proposed: &[Action],
    probs: &[[f64; N_ACTIONS]],
    values: &[f64],
    rng: &mut R,
) -> Vec<Action> {
    let n = positions.len();
    let mut actions = proposed.to_vec();
    let mut targets: Vec<Cell> = positions.iter().zip(&actions).map(|(&p, a)| a.apply(p)).collect();

    let resample = |i: usize, actions: &mut [Action], targets: &mut [Cell], rng: &mut R| {
        let mut allowed = [false; N_ACTIONS];
        for a in Action::ALL {
            allowed[a.index()] = action_is_clear(map, positions, targets, i, a);
        }
        let a = sample_restricted(&probs[i], &allowed, rng).unwrap_or(Action::Stay);
        actions[i] = a;
        targets[i] = a.apply(positions[i]);
    };

    for i in 0..n {
        if !map.is_free(targets[i]) {
            resample(i, &mut actions, &mut targets, rng);
        }
    }

    for _ in 0..n.max(1) {
        let pairs = conflict_pairs(positions, &targets);
        if pairs.is_empty() {
            break;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        for &(i, j) in &pairs {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            parent[a.max(b)] = a.min(b);
        }
        let mut in_conflict = vec![false; n];
        for &(i, j) in &pairs {
            in_conflict[i] = true;
            in_conflict[j] = true;
        }
        let mut losers = Vec::new();
        for root in 0..n {
            let members: Vec<usize> = (0..n)
                .filter(|&i| in_conflict[i] && find(&mut parent, i) == root)
                .collect();
            if members.is_empty() {
                continue;
            }
            let stayers: Vec<usize> = members.iter().copied().filter(|&i| targets[i] == positions[i]).collect();
            let winners = if stayers.is_empty() {
                let vals: Vec<f64> = members.iter().map(|&i| values[i]).collect();
                vec![members[softmax_draw(&vals, rng)]]
            } else {
                stayers
            };
            losers.extend(members.into_iter().filter(|i| !winners.contains(i)));
        }
        // Losers give up their plan before anyone re-samples, so re-sampled
        // moves are checked against the winners only.
        for &i in &losers {
            targets[i] = positions[i];
        }
        for &i in &losers {
            resample(i, &mut actions, &mut targets, rng);
        }
    }

    loop {
        let (_, reverted) = resolve_moves(map, positions, &actions);
        if !reverted.iter().any(|&r| r) {
            break;
        }
        for (a, r) in actions.iter_mut().zip(reverted) {
            if r {
                *a = Action::Stay;
            }
        }
    }
    actions
}

/// Actions whose target cell is free; Stay is always allowed.
pub fn valid_actions(map: &GridMap, pos: Cell) -> [bool; N_ACTIONS] {
    let mut out = [false; N_ACTIONS];
    for a in Action::ALL {
        out[a.index()] = map.is_free(a.apply(pos));
    }
    out
}

/// Log-softmax over the allowed actions only; disallowed entries are
/// negative infinity. The policy acts and learns under this distribution.
pub fn masked_log_softmax(logits: &[f64; N_ACTIONS], valid: &[bool; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let max = (0..N_ACTIONS).filter(|&a| valid[a]).map(|a| logits[a]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..N_ACTIONS).filter(|&a| valid[a]).map(|a| libm::exp(logits[a] - max)).sum();
    let lse = max + libm::log(sum);
    core::array::from_fn(|a| if valid[a] { logits[a] - lse } else { f64::NEG_INFINITY })
}

fn probs_of(logp: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    logp.map(|l| if l.is_finite() { libm::exp(l) } else { 0.0 })
}

/// Draws one action index from a probability vector.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64; N_ACTIONS], rng: &mut R) -> Action {
    sample_restricted(probs, &[true; N_ACTIONS], rng).unwrap_or(Action::Stay)
}

pub fn greedy_action(probs: &[f64; N_ACTIONS]) -> Action {
    let mut best = 0;
    for a in 1..N_ACTIONS {
        if probs[a] > probs[best] {
            best = a;
        }
    }
    Action::ALL[best]
}

/// Recurrent state carried between the steps of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentMemory {
    pub hidden: Vec<Vec<f64>>,
    pub prev_torso: Option<Vec<Vec<f64>>>,
    pub step: usize,
}

impl AgentMemory {
    pub fn new(model: &Model, n: usize) -> Self {
        Self {
            hidden: model.initial_hidden(n),
            prev_torso: None,
            step: 0,
        }
    }

    pub fn input(&self, env: &Env) -> StepInput {
        StepInput {
            obs: (0..env.n_agents()).map(|i| env.observe(i)).collect(),
            hidden: self.hidden.clone(),
            prev_torso: self.prev_torso.clone(),
            dist: env.manhattan_matrix(),
            step_tag: self.step,
        }
    }

    pub fn advance(&mut self, output: &StepOutput) {
        self.hidden = output.hidden.clone();
        self.prev_torso = Some(output.heads.iter().map(|h| h.torso.clone()).collect());
        self.step += 1;
    }
}

/// One joint decision: network outputs, the sampled actions and the actions
/// after conflict resolution.
#[derive(Clone, Debug)]
pub struct Decision {
    pub input: StepInput,
    pub output: StepOutput,
    pub sampled: Vec<Action>,
    pub actions: Vec<Action>,
    /// Moves into free cells (and Stay) per agent.
    pub valid: Vec<[bool; N_ACTIONS]>,
    /// Log-probability of each executed action under the obstacle-masked
    /// policy.
    pub log_probs: Vec<f64>,
}

pub fn decide<R: Rng + ?Sized>(
    model: &Model,
    env: &Env,
    memory: &AgentMemory,
    rng: &mut R,
    greedy: bool,
    resolve: bool,
) -> Result<Decision> {
    let input = memory.input(env);
    let (output, _) = model.forward_step(&input)?;
    let positions = env.positions();
    let valid: Vec<[bool; N_ACTIONS]> = positions.iter().map(|&p| valid_actions(env.map(), p)).collect();
    let logps: Vec<[f64; N_ACTIONS]> = output.heads.iter().zip(&valid).map(|(h, v)| masked_log_softmax(&h.logits, v)).collect();
    let probs: Vec<[f64; N_ACTIONS]> = logps.iter().map(probs_of).collect();
    let sampled: Vec<Action> = probs
        .iter()
        .map(|p| if greedy { greedy_action(p) } else { sample_action(p, rng) })
        .collect();
    let actions = if resolve {
        let values: Vec<f64> = output.heads.iter().map(|h| h.v_ext).collect();
        act_with_conflict_resolution(env.map(), &positions, &sampled, &probs, &values, rng)
    } else {
        sampled.clone()
    };
    let log_probs = actions.iter().zip(&logps).map(|(a, l)| l[a.index()]).collect();
    Ok(Decision {
        input,
        output,
        sampled,
        actions,
        valid,
        log_probs,
    })
}

/// Everything stored for one joint step of one environment.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub input: StepInput,
    pub actions: Vec<usize>,
    /// Allowed actions per agent when the step was taken.
    pub valid: Vec<[bool; N_ACTIONS]>,
    pub log_probs: Vec<f64>,
    pub v_ext: Vec<f64>,
    pub v_int: Vec<f64>,
    pub r_ext: Vec<f64>,
    pub r_int: Vec<f64>,
    pub blocking: Vec<bool>,
    /// The episode ended after this step.
    pub done: bool,
    pub adv_ext: Vec<f64>,
    pub adv_int: Vec<f64>,
    pub ret_ext: Vec<f64>,
    pub ret_int: Vec<f64>,
}

/// Per-environment trajectories of one collection round, aligned on step
/// index.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub envs: Vec<Vec<StepRecord>>,
    /// Bootstrap values `(v_ext, v_int)` per env and agent for the state after
    /// the last stored step.
    pub bootstrap: Vec<Vec<(f64, f64)>>,
}

impl RolloutBuffer {
    pub fn new(envs: usize) -> Self {
        Self {
            envs: vec![Vec::new(); envs],
            bootstrap: vec![Vec::new(); envs],
        }
    }

    pub fn len(&self) -> usize {
        self.envs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.envs.iter_mut().for_each(Vec::clear);
        self.bootstrap.iter_mut().for_each(Vec::clear);
    }

    /// Fills advantages and returns of both reward streams.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        for (records, boot) in self.envs.iter_mut().zip(&self.bootstrap) {
            let Some(first) = records.first() else { continue };
            let agents = first.actions.len();
            let dones: Vec<bool> = records.iter().map(|r| r.done).collect();
            for i in 0..agents {
                let (last_ext, last_int) = boot.get(i).copied().unwrap_or((0.0, 0.0));
                let column = |f: fn(&StepRecord) -> &Vec<f64>| records.iter().map(|r| f(r)[i]).collect::<Vec<f64>>();
                let (ae, re) = compute_gae(&column(|r| &r.r_ext), &column(|r| &r.v_ext), &dones, gamma, lambda, last_ext)?;
                let (ai, ri) = compute_gae(&column(|r| &r.r_int), &column(|r| &r.v_int), &dones, gamma, lambda, last_int)?;
                for (t, r) in records.iter_mut().enumerate() {
                    r.adv_ext.resize(agents, 0.0);
                    r.adv_int.resize(agents, 0.0);
                    r.ret_ext.resize(agents, 0.0);
                    r.ret_int.resize(agents, 0.0);
                    r.adv_ext[i] = ae[t];
                    r.adv_int[i] = ai[t];
                    r.ret_ext[i] = re[t];
                    r.ret_int[i] = ri[t];
                }
            }
        }
        Ok(())
    }

    fn record(&self, index: (usize, usize)) -> &StepRecord {
        &self.envs[index.0][index.1]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub blocking_loss: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

struct MinibatchLoss {
    policy: f64,
    value: f64,
    entropy: f64,
    blocking: f64,
    clipped: usize,
    samples: usize,
}

/// Loss and gradient (accumulated into `g`) for one minibatch of joint steps
/// at parameters `p`.
fn minibatch_loss(
    model: &Model,
    p: &[f64],
    buffer: &RolloutBuffer,
    batch: &[(usize, usize)],
    config: &TrainConfig,
    mut g: Option<&mut [f64]>,
) -> Result<MinibatchLoss> {
    let beta = config.intrinsic_weight;
    let mut advs = Vec::new();
    for &idx in batch {
        let r = buffer.record(idx);
        advs.extend(r.adv_ext.iter().zip(&r.adv_int).map(|(e, i)| e + beta * i));
    }
    let count = advs.len().max(1) as f64;
    let mean = advs.iter().sum::<f64>() / count;
    let var = advs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / count;
    let std = libm::sqrt(var) + 1e-8;

    let mut out = MinibatchLoss {
        policy: 0.0,
        value: 0.0,
        entropy: 0.0,
        blocking: 0.0,
        clipped: 0,
        samples: advs.len(),
    };
    let mut k = 0;
    for &idx in batch {
        let rec = buffer.record(idx);
        let (step, cache) = model.forward_step_with(p, &rec.input)?;
        let mut grads = Vec::with_capacity(step.heads.len());
        for (i, h) in step.heads.iter().enumerate() {
            let adv = (advs[k] - mean) / std;
            k += 1;
            let a = rec.actions[i];
            let valid = &rec.valid[i];
            let logp = masked_log_softmax(&h.logits, valid);
            let q = probs_of(&logp);
            let ratio = libm::exp(logp[a] - rec.log_probs[i]);
            let objective = clipped_objective(ratio, adv, config.clip);
            debug_assert!(objective <= (1.0 + config.clip) * adv.abs() + 1e-12);
            out.policy -= objective / count;
            let clipped = (ratio - 1.0).abs() > config.clip;
            out.clipped += usize::from(clipped);
            let entropy: f64 = -(0..N_ACTIONS).filter(|&c| valid[c]).map(|c| q[c] * logp[c]).sum::<f64>();
            out.entropy += entropy / count;
            let de = h.v_ext - rec.ret_ext[i];
            let di = h.v_int - rec.ret_int[i];
            out.value += (de * de + di * di) / count;
            let target = if rec.blocking[i] { 1.0 } else { 0.0 };
            let bp = sigmoid(h.blocking_logit);
            let bce = -(target * libm::log(bp.max(1e-12)) + (1.0 - target) * libm::log((1.0 - bp).max(1e-12)));
            out.blocking += bce / count;

            if g.is_some() {
                // The unclipped branch is the active one exactly when it is
                // the smaller of the two terms.
                let dlogp = if ratio * adv <= ratio.clamp(1.0 - config.clip, 1.0 + config.clip) * adv {
                    -ratio * adv / count
                } else {
                    0.0
                };
                let mut hg = HeadGrads::default();
                for c in (0..N_ACTIONS).filter(|&c| valid[c]) {
                    let onehot = if c == a { 1.0 } else { 0.0 };
                    hg.logits[c] = dlogp * (onehot - q[c]) + config.entropy_coef / count * q[c] * (logp[c] + entropy);
                }
                hg.v_ext = config.value_coef * 2.0 * de / count;
                hg.v_int = config.value_coef * 2.0 * di / count;
                hg.blocking_logit = config.blocking_coef * (bp - target) / count;
                grads.push(hg);
            }
        }
        if let Some(g) = g.as_deref_mut() {
            model.backward_step_with(p, &rec.input, &cache, &grads, g);
        }
    }
    Ok(out)
}

impl MinibatchLoss {
    fn total(&self, config: &TrainConfig) -> f64 {
        self.policy + config.value_coef * self.value - config.entropy_coef * self.entropy + config.blocking_coef * self.blocking
    }
}

/// The clipped policy loss of `batch` at the model's current parameters.
pub fn policy_loss(model: &Model, buffer: &RolloutBuffer, batch: &[(usize, usize)], config: &TrainConfig) -> Result<f64> {
    Ok(minibatch_loss(model, model.params(), buffer, batch, config, None)?.policy)
}

/// Every `(env, step)` index in the buffer.
pub fn buffer_indices(buffer: &RolloutBuffer) -> Vec<(usize, usize)> {
    buffer
        .envs
        .iter()
        .enumerate()
        .flat_map(|(e, recs)| (0..recs.len()).map(move |t| (e, t)))
        .collect()
}

/// Runs `config.epochs` passes of shuffled minibatch updates. Advantages must
/// already be computed.
pub fn ppo_update<R: Rng + ?Sized>(
    model: &mut Model,
    adam: &mut Adam,
    buffer: &RolloutBuffer,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let mut indices = buffer_indices(buffer);
    let mut stats = UpdateStats::default();
    let mut samples = 0usize;
    let mut clipped = 0usize;
    for _ in 0..config.epochs {
        indices.shuffle(rng);
        for batch in indices.chunks(config.minibatch) {
            let mut g = model.graph.zeros_like();
            let loss = minibatch_loss(model, model.params(), buffer, batch, config, Some(&mut g))?;
            let total = loss.total(config);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "policy {} value {} entropy {} blocking {}",
                    loss.policy, loss.value, loss.entropy, loss.blocking
                )));
            }
            stats.grad_norm += clip_global_norm(&mut g, config.max_grad_norm);
            adam.step(model.graph.data_mut(), &g);
            stats.policy_loss += loss.policy;
            stats.value_loss += loss.value;
            stats.entropy += loss.entropy;
            stats.blocking_loss += loss.blocking;
            samples += loss.samples;
            clipped += loss.clipped;
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches.max(1) as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.blocking_loss /= m;
    stats.grad_norm /= m;
    stats.clip_frac = clipped as f64 / samples.max(1) as f64;
    Ok(stats)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub round: usize,
    pub env_steps: usize,
    /// Mean extrinsic reward per agent and step over the round.
    pub mean_reward: f64,
    /// Success rate in percent over the sliding episode window.
    pub recent_sr: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub blocking_loss: f64,
}

struct Worker {
    env: Env,
    memory: AgentMemory,
}

/// Stateful training loop; [`train`] drives it to completion.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub env_config: EnvConfig,
    pub task: TaskConfig,
    rng: ChaCha8Rng,
    adam: Adam,
    workers: Vec<Worker>,
    window: VecDeque<bool>,
    episodes: usize,
    round: usize,
    env_steps: usize,
    last_good: Vec<f64>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        env_config: EnvConfig,
        task: TaskConfig,
        mut model_config: ModelConfig,
        variant: CommMode,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        env_config.validate()?;
        task.validate()?;
        if model_config.policy.fov != env_config.fov {
            return Err(Error::InvalidConfig(format!(
                "policy field of view {} differs from the environment's {}",
                model_config.policy.fov, env_config.fov
            )));
        }
        model_config.mode = variant;
        model_config.comm_radius = env_config.comm_radius;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(model_config, &mut rng)?;
        let mut workers = Vec::with_capacity(config.envs);
        for _ in 0..config.envs {
            let env = task.episode(env_config, &mut rng)?;
            let memory = AgentMemory::new(&model, task.agents);
            workers.push(Worker { env, memory });
        }
        let adam = Adam::new(model.graph.len(), config.lr);
        let last_good = model.params().to_vec();
        Ok(Self {
            model,
            config,
            env_config,
            task,
            rng,
            adam,
            workers,
            window: VecDeque::new(),
            episodes: 0,
            round: 0,
            env_steps: 0,
            last_good,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn finished(&self) -> bool {
        self.env_steps >= self.config.total_steps
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    /// Success rate in percent over the sliding window (0 before any episode
    /// has finished).
    pub fn recent_sr(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        100.0 * self.window.iter().filter(|&&s| s).count() as f64 / self.window.len() as f64
    }

    /// Parameters from before the most recent update.
    pub fn last_good(&self) -> &[f64] {
        &self.last_good
    }

    /// Collects one horizon of experience in every environment. Returns the
    /// buffer and the mean extrinsic reward per agent step.
    pub fn collect(&mut self) -> Result<(RolloutBuffer, f64)> {
        let mut buffer = RolloutBuffer::new(self.workers.len());
        let mut reward_sum = 0.0;
        let mut reward_count = 0usize;
        for (w, worker) in self.workers.iter_mut().enumerate() {
            for _ in 0..self.config.horizon {
                let d = decide(&self.model, &worker.env, &worker.memory, &mut self.rng, false, true)?;
                let outcome = worker.env.step(&d.actions)?;
                worker.memory.advance(&d.output);
                reward_sum += outcome.extrinsic_sum();
                reward_count += outcome.agents.len();
                buffer.envs[w].push(StepRecord {
                    input: d.input,
                    actions: d.actions.iter().map(|a| a.index()).collect(),
                    valid: d.valid,
                    log_probs: d.log_probs,
                    v_ext: d.output.heads.iter().map(|h| h.v_ext).collect(),
                    v_int: d.output.heads.iter().map(|h| h.v_int).collect(),
                    r_ext: outcome.agents.iter().map(|a| a.extrinsic).collect(),
                    r_int: outcome.agents.iter().map(|a| a.intrinsic).collect(),
                    blocking: outcome.agents.iter().map(|a| a.blocking).collect(),
                    done: outcome.episode_done,
                    adv_ext: Vec::new(),
                    adv_int: Vec::new(),
                    ret_ext: Vec::new(),
                    ret_int: Vec::new(),
                });
                if outcome.episode_done {
                    let success = worker.env.all_at_goal();
                    self.window.push_back(success);
                    while self.window.len() > self.config.sr_window {
                        self.window.pop_front();
                    }
                    self.episodes += 1;
                    worker.env = self.task.episode(self.env_config, &mut self.rng)?;
                    worker.memory = AgentMemory::new(&self.model, self.task.agents);
                }
            }
            let last_done = buffer.envs[w].last().is_some_and(|r| r.done);
            buffer.bootstrap[w] = if last_done {
                vec![(0.0, 0.0); self.task.agents]
            } else {
                let (out, _) = self.model.forward_step(&worker.memory.input(&worker.env))?;
                out.heads.iter().map(|h| (h.v_ext, h.v_int)).collect()
            };
        }
        self.env_steps += self.config.horizon * self.workers.len();
        Ok((buffer, reward_sum / reward_count.max(1) as f64))
    }

    /// Collect, update and report one round. On a non-finite loss or
    /// parameters the model is rolled back to the last good parameters and
    /// the error is returned.
    pub fn run_round(&mut self) -> Result<LogRow> {
        let (mut buffer, mean_reward) = self.collect()?;
        buffer.compute_advantages(self.config.gamma, self.config.lambda)?;
        self.last_good.copy_from_slice(self.model.params());
        let round = self.round + 1;
        let stats = match ppo_update(&mut self.model, &mut self.adam, &buffer, &self.config, &mut self.rng) {
            Ok(s) => s,
            Err(e) => {
                self.model.graph.data_mut().copy_from_slice(&self.last_good);
                return Err(e);
            }
        };
        if !self.model.graph.is_finite() {
            self.model.graph.data_mut().copy_from_slice(&self.last_good);
            return Err(Error::NonFiniteParams { round });
        }
        self.round = round;
        Ok(LogRow {
            round,
            env_steps: self.env_steps,
            mean_reward,
            recent_sr: self.recent_sr(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_frac: stats.clip_frac,
            blocking_loss: stats.blocking_loss,
        })
    }
}

/// Result of [`train`]. When `error` is set the model holds the last good
/// parameters.
#[derive(Debug)]
pub struct TrainRun {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub error: Option<Error>,
}

pub fn train(
    config: TrainConfig,
    env_config: EnvConfig,
    task: TaskConfig,
    model_config: ModelConfig,
    variant: CommMode,
    seed: u64,
) -> Result<TrainRun> {
    let mut trainer = Trainer::new(config, env_config, task, model_config, variant, seed)?;
    let mut log = Vec::new();
    let mut error = None;
    while !trainer.finished() {
        match trainer.run_round() {
            Ok(row) => log.push(row),
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    Ok(TrainRun {
        model: trainer.model,
        log,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_of_zeros_is_zero() {
        let (a, r) = compute_gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.9, 0.9, 0.0).unwrap();
        assert_eq!(a, vec![0.0; 5]);
        assert_eq!(r, vec![0.0; 5]);
    }

    #[test]
    fn gae_single_step() {
        let (a, _) = compute_gae(&[1.0], &[0.0], &[false], 1.0, 1.0, 0.0).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn gae_rejects_ragged_input() {
        assert_eq!(
            compute_gae(&[0.0; 3], &[0.0; 2], &[false; 3], 0.9, 0.9, 0.0),
            Err(Error::LengthMismatch("rewards and values"))
        );
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_objective(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_objective(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_objective(1.0, 3.0, 0.2), 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { gamma: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resolution_leaves_clear_actions_alone() {
        let map = GridMap::empty(5, 5).unwrap();
        let pos = [Cell::new(0, 0), Cell::new(4, 4)];
        let acts = [Action::Right, Action::Up];
        let probs = [[0.2; N_ACTIONS]; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = act_with_conflict_resolution(&map, &pos, &acts, &probs, &[0.0, 0.0], &mut rng);
        assert_eq!(out, acts.to_vec());
    }
}
