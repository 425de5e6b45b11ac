//! Central finite-difference checks for every analytic backward pass.
//!
//! Each suite builds a small random instance, computes analytic gradients of
//! a random linear functional of the outputs, and compares them entry by
//! entry with `(L(p + h e_k) - L(p - h e_k)) / 2h`. Random weights are used
//! instead of a plain sum because layer-normalized outputs sum to a constant.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid_world::{Observation, VEC_LEN};
use crate::param::ParamGraph;
use crate::policy_net::{HeadGrads, Model, ModelConfig, PolicyConfig, StepInput, N_ACTIONS};
use crate::rmha_comm::{build_mask, CommConfig, CommMode, RmhaComm};
use crate::Result;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub suite: &'static str,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Central differences of `loss` around `params`.
pub fn finite_difference(params: &[f64], step: f64, loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut out = vec![0.0; p.len()];
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + step;
        let plus = loss(&p);
        p[k] = orig - step;
        let minus = loss(&p);
        p[k] = orig;
        out[k] = (plus - minus) / (2.0 * step);
    }
    out
}

/// Per-tensor maximum relative error between two gradient buffers.
pub fn compare(graph: &ParamGraph, analytic: &[f64], numeric: &[f64]) -> Vec<TensorCheck> {
    graph
        .specs()
        .iter()
        .map(|spec| {
            let a = spec.slot.of(analytic);
            let n = spec.slot.of(numeric);
            TensorCheck {
                name: spec.name.clone(),
                entries: spec.slot.len,
                max_rel_error: a.iter().zip(n).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max),
            }
        })
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u32>> {
    let cells: Vec<(i32, i32)> = (0..n).map(|_| (rng.random_range(0..12), rng.random_range(0..12))).collect();
    cells
        .iter()
        .map(|a| cells.iter().map(|b| a.0.abs_diff(b.0) + a.1.abs_diff(b.1)).collect())
        .collect()
}

fn random_obs(rng: &mut ChaCha8Rng, fov: usize) -> Observation {
    let mut obs = Observation::zeros(fov);
    for v in obs.maps.iter_mut() {
        *v = if rng.random_bool(0.3) { 1.0 } else { 0.0 };
    }
    let mut vec = [0.0; VEC_LEN];
    for v in vec.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    obs.vec = vec;
    obs
}

/// Instance size used by the communication and model suites.
pub fn small_comm_config() -> CommConfig {
    CommConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        buckets: 16,
        ffn_mult: 4,
    }
}

pub fn small_model_config(mode: CommMode) -> ModelConfig {
    ModelConfig {
        policy: PolicyConfig {
            fov: 3,
            spatial: 12,
            scalar: 6,
            hidden: 10,
            torso: 10,
        },
        comm: small_comm_config(),
        mode,
        comm_radius: 6,
    }
}

/// Attention block: all parameters, N=4, d=8, h=2, L=2, partial masking.
pub fn comm_suite(seed: u64, mode: CommMode) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = ParamGraph::new();
    let comm = RmhaComm::new(&mut graph, "comm", small_comm_config())?;
    graph.initialize(&mut rng);
    let n = 4;
    let d = comm.config.dim;
    let messages = random_vec(&mut rng, n * d, 1.0);
    let dist = random_dist(&mut rng, n);
    let mask = build_mask(&dist, 8);
    let weights = random_vec(&mut rng, n * d, 1.0);

    let (_, cache) = comm.forward(graph.data(), &messages, &dist, &mask, mode)?;
    let mut analytic = graph.zeros_like();
    comm.backward(graph.data(), &cache, &weights, &mut analytic, None);
    let numeric = finite_difference(graph.data(), STEP, |p| {
        let (out, _) = comm.forward(p, &messages, &dist, &mask, mode).expect("finite forward");
        out.iter().zip(&weights).map(|(a, b)| a * b).sum()
    });
    Ok(GradcheckReport {
        suite: match mode {
            CommMode::Rmha => "comm/rmha",
            CommMode::GraphComm => "comm/graph_comm",
            CommMode::None => "comm/none",
        },
        tensors: compare(&graph, &analytic, &numeric)
            .into_iter()
            .filter(|t| mode == CommMode::Rmha || !t.name.starts_with("comm.distance"))
            .collect(),
    })
}

/// Input gradient of the attention block with respect to the messages.
pub fn comm_input_suite(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = ParamGraph::new();
    let comm = RmhaComm::new(&mut graph, "comm", small_comm_config())?;
    graph.initialize(&mut rng);
    let n = 4;
    let d = comm.config.dim;
    let messages = random_vec(&mut rng, n * d, 1.0);
    let dist = random_dist(&mut rng, n);
    let mask = build_mask(&dist, 8);
    let weights = random_vec(&mut rng, n * d, 1.0);
    let (_, cache) = comm.forward(graph.data(), &messages, &dist, &mask, CommMode::Rmha)?;
    let mut sink = graph.zeros_like();
    let mut analytic = vec![0.0; n * d];
    comm.backward(graph.data(), &cache, &weights, &mut sink, Some(&mut analytic));
    let numeric = finite_difference(&messages, STEP, |m| {
        let (out, _) = comm.forward(graph.data(), m, &dist, &mask, CommMode::Rmha).expect("finite forward");
        out.iter().zip(&weights).map(|(a, b)| a * b).sum()
    });
    let max_rel_error = analytic.iter().zip(&numeric).map(|(&a, &b)| relative_error(a, b)).fold(0.0, f64::max);
    Ok(GradcheckReport {
        suite: "comm/messages",
        tensors: vec![TensorCheck {
            name: "messages".into(),
            entries: n * d,
            max_rel_error,
        }],
    })
}

/// Distance embedding alone: gradient of both embedded outputs.
pub fn embedding_suite(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = ParamGraph::new();
    let comm = RmhaComm::new(&mut graph, "comm", small_comm_config())?;
    graph.initialize(&mut rng);
    let n = 4;
    let d = comm.config.dim;
    let mut dist = random_dist(&mut rng, n);
    dist[0][3] = 40;
    dist[3][0] = 40;
    let wq = random_vec(&mut rng, n * n * d, 1.0);
    let wk = random_vec(&mut rng, n * n * d, 1.0);
    let emb = comm.embedding;
    let mut analytic = graph.zeros_like();
    emb.embed_backward(graph.data(), &dist, &wq, &wk, &mut analytic);
    let numeric = finite_difference(graph.data(), STEP, |p| {
        let (q, k) = emb.embed(p, &dist);
        q.iter().zip(&wq).map(|(a, b)| a * b).sum::<f64>() + k.iter().zip(&wk).map(|(a, b)| a * b).sum::<f64>()
    });
    Ok(GradcheckReport {
        suite: "comm/embedding",
        tensors: compare(&graph, &analytic, &numeric)
            .into_iter()
            .filter(|t| t.name.starts_with("comm.distance"))
            .collect(),
    })
}

/// Encoder and recurrent cell: gradient of the new hidden state.
pub fn encoder_suite(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = small_model_config(CommMode::Rmha);
    let model = Model::new(config, &mut rng)?;
    let obs = random_obs(&mut rng, 3);
    let hidden = random_vec(&mut rng, config.policy.hidden, 0.8);
    let weights = random_vec(&mut rng, config.policy.hidden, 1.0);
    let (_, cache) = model.policy.encode(model.params(), &obs, &hidden)?;
    let mut analytic = model.graph.zeros_like();
    model.policy.encode_backward(model.params(), &cache, &weights, &mut analytic, None);
    let numeric = finite_difference(model.params(), STEP, |p| {
        let (h, _) = model.policy.encode(p, &obs, &hidden).expect("shapes");
        h.iter().zip(&weights).map(|(a, b)| a * b).sum()
    });
    let encoder = ["policy.spatial", "policy.scalar", "policy.fuse", "policy.cell"];
    Ok(GradcheckReport {
        suite: "policy/encoder",
        tensors: compare(&model.graph, &analytic, &numeric)
            .into_iter()
            .filter(|t| encoder.iter().any(|e| t.name.starts_with(e)))
            .collect(),
    })
}

fn step_input(rng: &mut ChaCha8Rng, config: &ModelConfig, n: usize) -> StepInput {
    StepInput {
        obs: (0..n).map(|_| random_obs(rng, config.policy.fov)).collect(),
        hidden: (0..n).map(|_| random_vec(rng, config.policy.hidden, 0.8)).collect(),
        prev_torso: Some(
            (0..n)
                .map(|_| random_vec(rng, config.policy.torso, 1.0).into_iter().map(f64::abs).collect())
                .collect(),
        ),
        dist: random_dist(rng, n),
        step_tag: 3,
    }
}

fn model_suite(seed: u64, n: usize, mode: CommMode, logits_only: bool, suite: &'static str) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = small_model_config(mode);
    let model = Model::new(config, &mut rng)?;
    let input = step_input(&mut rng, &config, n);
    let grads: Vec<HeadGrads> = (0..n)
        .map(|_| {
            if logits_only {
                HeadGrads {
                    logits: [1.0; N_ACTIONS],
                    ..HeadGrads::default()
                }
            } else {
                let mut logits = [0.0; N_ACTIONS];
                logits.iter_mut().for_each(|l| *l = rng.random_range(-1.0..1.0));
                HeadGrads {
                    logits,
                    v_ext: rng.random_range(-1.0..1.0),
                    v_int: rng.random_range(-1.0..1.0),
                    blocking_logit: rng.random_range(-1.0..1.0),
                }
            }
        })
        .collect();
    let loss = |p: &[f64]| -> f64 {
        let (out, _) = model.forward_step_with(p, &input).expect("finite forward");
        out.heads
            .iter()
            .zip(&grads)
            .map(|(h, g)| {
                h.logits.iter().zip(&g.logits).map(|(a, b)| a * b).sum::<f64>()
                    + h.v_ext * g.v_ext
                    + h.v_int * g.v_int
                    + h.blocking_logit * g.blocking_logit
            })
            .sum()
    };
    let (_, cache) = model.forward_step(&input)?;
    let mut analytic = model.graph.zeros_like();
    model.backward_step(&input, &cache, &grads, &mut analytic);
    let numeric = finite_difference(model.params(), STEP, loss);
    Ok(GradcheckReport {
        suite,
        tensors: compare(&model.graph, &analytic, &numeric),
    })
}

/// Full per-step model, every parameter tensor, N=4, d=8, h=2, L=2.
pub fn model_step_suite(seed: u64) -> Result<GradcheckReport> {
    model_suite(seed, 4, CommMode::Rmha, false, "model/step")
}

/// Sum of policy logits through encode, attend and heads for three agents.
pub fn end_to_end_suite(seed: u64) -> Result<GradcheckReport> {
    model_suite(seed, 3, CommMode::Rmha, true, "model/logits")
}

/// Every suite with a fixed seed.
pub fn run_all(seed: u64) -> Result<Vec<GradcheckReport>> {
    Ok(vec![
        embedding_suite(seed)?,
        comm_suite(seed, CommMode::Rmha)?,
        comm_suite(seed, CommMode::GraphComm)?,
        comm_input_suite(seed)?,
        encoder_suite(seed)?,
        end_to_end_suite(seed)?,
        model_step_suite(seed)?,
    ])
}
