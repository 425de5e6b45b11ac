//! Shared-parameter agent network.
//!
//! Each agent encodes its local view with a small MLP (the field of view is
//! only a few cells wide, so convolutions would have nothing to slide over),
//! fuses it with the scalar vector, and updates a GRU hidden state. The new
//! hidden state is concatenated with the agent's row of the mixed message
//! matrix and passed through a shared torso into five heads: action logits,
//! extrinsic value, intrinsic value, next outgoing message, blocking logit.
//!
//! [`Model`] wires the policy network and the communication block together
//! for one simultaneous step of all agents.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::grid_world::{Observation, VEC_LEN};
use crate::nn::{sigmoid, silu_backward, silu_vec, softmax, GruCache, GruCell, Linear};
use crate::param::ParamGraph;
use crate::rmha_comm::{build_mask, CommCache, CommConfig, CommMask, CommMode, MessageMatrix, RmhaComm};
use crate::{Error, Result};

pub const N_ACTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyConfig {
    pub fov: usize,
    /// Width of the two spatial layers.
    pub spatial: usize,
    /// Width of the scalar-vector layer.
    pub scalar: usize,
    /// Recurrent state size.
    pub hidden: usize,
    /// Width of the shared torso feeding the heads.
    pub torso: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            fov: 3,
            spatial: 64,
            scalar: 16,
            hidden: 128,
            torso: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub logits: [f64; N_ACTIONS],
    pub probs: [f64; N_ACTIONS],
    pub v_ext: f64,
    pub v_int: f64,
    pub next_message: Vec<f64>,
    pub blocking_logit: f64,
    /// Torso activation; the next step's outgoing message is derived from it.
    pub torso: Vec<f64>,
}

impl HeadOutputs {
    pub fn blocking_prob(&self) -> f64 {
        sigmoid(self.blocking_logit)
    }
}

/// Loss gradients with respect to the head outputs of one agent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadGrads {
    pub logits: [f64; N_ACTIONS],
    pub v_ext: f64,
    pub v_int: f64,
    pub blocking_logit: f64,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    flat: Vec<f64>,
    vec: [f64; VEC_LEN],
    s1_pre: Vec<f64>,
    s1: Vec<f64>,
    s2_pre: Vec<f64>,
    v0_pre: Vec<f64>,
    fused_in: Vec<f64>,
    fused_pre: Vec<f64>,
    fused: Vec<f64>,
    hidden_in: Vec<f64>,
    gru: GruCache,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    z: Vec<f64>,
    torso_pre: Vec<f64>,
    torso: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub message_dim: usize,
    spatial1: Linear,
    spatial2: Linear,
    scalar_fc: Linear,
    fuse: Linear,
    cell: GruCell,
    torso: Linear,
    policy: Linear,
    value_ext: Linear,
    value_int: Linear,
    message: Linear,
    blocking: Linear,
}

impl PolicyNet {
    pub fn new(graph: &mut ParamGraph, name: &str, config: PolicyConfig, message_dim: usize) -> Self {
        let flat = Observation::map_len(config.fov);
        let z = config.hidden + message_dim;
        Self {
            config,
            message_dim,
            spatial1: Linear::new(graph, &format!("{name}.spatial1"), flat, config.spatial, true),
            spatial2: Linear::new(graph, &format!("{name}.spatial2"), config.spatial, config.spatial, true),
            scalar_fc: Linear::new(graph, &format!("{name}.scalar"), VEC_LEN, config.scalar, true),
            fuse: Linear::new(graph, &format!("{name}.fuse"), config.spatial + config.scalar, config.hidden, true),
            cell: GruCell::new(graph, &format!("{name}.cell"), config.hidden, config.hidden),
            torso: Linear::new(graph, &format!("{name}.torso"), z, config.torso, true),
            policy: Linear::new(graph, &format!("{name}.policy"), config.torso, N_ACTIONS, true),
            value_ext: Linear::new(graph, &format!("{name}.value_ext"), config.torso, 1, true),
            value_int: Linear::new(graph, &format!("{name}.value_int"), config.torso, 1, true),
            message: Linear::new(graph, &format!("{name}.message"), config.torso, message_dim, true),
            blocking: Linear::new(graph, &format!("{name}.blocking"), config.torso, 1, true),
        }
    }

    /// Returns `(features, new_hidden)`; the features are the new recurrent
    /// state, so both vectors are equal.
    pub fn encode(&self, p: &[f64], obs: &Observation, hidden: &[f64]) -> Result<(Vec<f64>, EncodeCache)> {
        let flat_len = Observation::map_len(self.config.fov);
        if obs.maps.len() != flat_len {
            return Err(Error::ShapeMismatch {
                what: "observation maps",
                expected: flat_len,
                got: obs.maps.len(),
            });
        }
        if hidden.len() != self.config.hidden {
            return Err(Error::ShapeMismatch {
                what: "hidden state",
                expected: self.config.hidden,
                got: hidden.len(),
            });
        }
        let s1_pre = self.spatial1.apply(p, &obs.maps);
        let s1 = silu_vec(&s1_pre);
        let s2_pre = self.spatial2.apply(p, &s1);
        let v0_pre = self.scalar_fc.apply(p, &obs.vec);
        let mut fused_in = silu_vec(&s2_pre);
        fused_in.extend(silu_vec(&v0_pre));
        let fused_pre = self.fuse.apply(p, &fused_in);
        let fused = silu_vec(&fused_pre);
        let (h, gru) = self.cell.forward(p, &fused, hidden);
        let cache = EncodeCache {
            flat: obs.maps.clone(),
            vec: obs.vec,
            s1_pre,
            s1,
            s2_pre,
            v0_pre,
            fused_in,
            fused_pre,
            fused,
            hidden_in: hidden.to_vec(),
            gru,
        };
        Ok((h, cache))
    }

    pub fn encode_backward(&self, p: &[f64], cache: &EncodeCache, dh: &[f64], g: &mut [f64], dhidden: Option<&mut [f64]>) {
        let mut dfused = vec![0.0; self.config.hidden];
        self.cell
            .backward(p, &cache.fused, &cache.hidden_in, &cache.gru, dh, g, Some(&mut dfused), dhidden);
        silu_backward(&mut dfused, &cache.fused_pre);
        let mut dfin = vec![0.0; cache.fused_in.len()];
        self.fuse.backward(p, &cache.fused_in, &dfused, g, Some(&mut dfin));
        let (ds2, dv0) = dfin.split_at_mut(self.config.spatial);
        silu_backward(dv0, &cache.v0_pre);
        self.scalar_fc.backward(p, &cache.vec, dv0, g, None);
        silu_backward(ds2, &cache.s2_pre);
        let mut ds1 = vec![0.0; self.config.spatial];
        self.spatial2.backward(p, &cache.s1, ds2, g, Some(&mut ds1));
        silu_backward(&mut ds1, &cache.s1_pre);
        self.spatial1.backward(p, &cache.flat, &ds1, g, None);
    }

    /// Outgoing message derived from a torso activation.
    pub fn message_from_torso(&self, p: &[f64], torso: &[f64]) -> Vec<f64> {
        let mut m = self.message.apply(p, torso);
        m.iter_mut().for_each(|v| *v = libm::tanh(*v));
        m
    }

    /// Backward of [`Self::message_from_torso`] given the produced message.
    pub fn message_backward(&self, p: &[f64], torso: &[f64], message: &[f64], dmessage: &[f64], g: &mut [f64]) {
        let dpre: Vec<f64> = dmessage.iter().zip(message).map(|(d, m)| d * (1.0 - m * m)).collect();
        self.message.backward(p, torso, &dpre, g, None);
    }

    pub fn heads(&self, p: &[f64], features: &[f64], message_in: &[f64]) -> Result<(HeadOutputs, HeadCache)> {
        if message_in.len() != self.message_dim {
            return Err(Error::ShapeMismatch {
                what: "message row",
                expected: self.message_dim,
                got: message_in.len(),
            });
        }
        let mut z = features.to_vec();
        z.extend_from_slice(message_in);
        let torso_pre = self.torso.apply(p, &z);
        let torso = silu_vec(&torso_pre);
        let mut logits = [0.0; N_ACTIONS];
        self.policy.forward(p, &torso, &mut logits);
        let probs: [f64; N_ACTIONS] = softmax(&logits).try_into().expect("five actions");
        let v_ext = self.value_ext.apply(p, &torso)[0];
        let v_int = self.value_int.apply(p, &torso)[0];
        let blocking_logit = self.blocking.apply(p, &torso)[0];
        let next_message = self.message_from_torso(p, &torso);
        let out = HeadOutputs {
            logits,
            probs,
            v_ext,
            v_int,
            next_message,
            blocking_logit,
            torso: torso.clone(),
        };
        Ok((out, HeadCache { z, torso_pre, torso }))
    }

    /// Accumulates head gradients; returns `(d features, d message_in)`.
    pub fn heads_backward(&self, p: &[f64], cache: &HeadCache, grads: &HeadGrads, g: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
        let mut dtorso = vec![0.0; self.config.torso];
        self.policy.backward(p, &cache.torso, &grads.logits, g, Some(&mut dtorso));
        self.value_ext.backward(p, &cache.torso, &[grads.v_ext], g, Some(&mut dtorso));
        self.value_int.backward(p, &cache.torso, &[grads.v_int], g, Some(&mut dtorso));
        self.blocking.backward(p, &cache.torso, &[grads.blocking_logit], g, Some(&mut dtorso));
        silu_backward(&mut dtorso, &cache.torso_pre);
        let mut dz = vec![0.0; cache.z.len()];
        self.torso.backward(p, &cache.z, &dtorso, g, Some(&mut dz));
        let dm = dz.split_off(self.config.hidden);
        (dz, dm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub policy: PolicyConfig,
    pub comm: CommConfig,
    pub mode: CommMode,
    pub comm_radius: u32,
}

impl ModelConfig {
    /// Narrow layers and a single attention layer for CPU training.
    pub fn desk(mode: CommMode) -> Self {
        Self {
            policy: PolicyConfig {
                fov: 3,
                spatial: 32,
                scalar: 8,
                hidden: 32,
                torso: 32,
            },
            comm: CommConfig {
                dim: 16,
                heads: 2,
                layers: 1,
                buckets: 16,
                ffn_mult: 2,
            },
            mode,
            comm_radius: 40,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig::default(),
            comm: CommConfig::default(),
            mode: CommMode::Rmha,
            comm_radius: 40,
        }
    }
}

/// Inputs for one simultaneous decision of all agents.
///
/// `prev_torso` holds every agent's torso activation from the previous step;
/// the incoming message matrix is recomputed from it so that the message head
/// receives gradient through one step of delay. `None` means the first step
/// of an episode, where all messages are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub obs: Vec<Observation>,
    pub hidden: Vec<Vec<f64>>,
    pub prev_torso: Option<Vec<Vec<f64>>>,
    pub dist: Vec<Vec<u32>>,
    pub step_tag: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub heads: Vec<HeadOutputs>,
    pub hidden: Vec<Vec<f64>>,
    /// `M^{t-1}` as fed into the communication block.
    pub messages_in: MessageMatrix,
    /// Communication output, one row per agent.
    pub mixed: MessageMatrix,
}

#[derive(Clone, Debug)]
pub struct StepCache {
    encode: Vec<EncodeCache>,
    heads: Vec<HeadCache>,
    comm: CommCache,
    messages_in: Vec<f64>,
}

/// Policy network plus communication block over one parameter graph.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: ParamGraph,
    pub policy: PolicyNet,
    pub comm: RmhaComm,
    /// Replaces the communication output with zeros while keeping the mode.
    pub zero_messages: bool,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut graph = ParamGraph::new();
        let comm = RmhaComm::new(&mut graph, "comm", config.comm)?;
        let policy = PolicyNet::new(&mut graph, "policy", config.policy, config.comm.dim);
        graph.initialize(rng);
        Ok(Self {
            config,
            graph,
            policy,
            comm,
            zero_messages: false,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut graph = ParamGraph::new();
        let comm = RmhaComm::new(&mut graph, "comm", config.comm)?;
        let policy = PolicyNet::new(&mut graph, "policy", config.policy, config.comm.dim);
        Ok(Self {
            config,
            graph,
            policy,
            comm,
            zero_messages: false,
        })
    }

    pub fn params(&self) -> &[f64] {
        self.graph.data()
    }

    pub fn initial_hidden(&self, n: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.config.policy.hidden]; n]
    }

    pub fn mask(&self, dist: &[Vec<u32>]) -> CommMask {
        build_mask(dist, self.config.comm_radius)
    }

    pub fn forward_step(&self, input: &StepInput) -> Result<(StepOutput, StepCache)> {
        self.forward_step_with(self.graph.data(), input)
    }

    /// Forward pass with an explicit parameter buffer (used by finite
    /// differences).
    pub fn forward_step_with(&self, p: &[f64], input: &StepInput) -> Result<(StepOutput, StepCache)> {
        let n = input.obs.len();
        let d = self.config.comm.dim;
        if input.hidden.len() != n || input.dist.len() != n {
            return Err(Error::ShapeMismatch {
                what: "agents in step input",
                expected: n,
                got: input.hidden.len().min(input.dist.len()),
            });
        }
        let mut messages_in = vec![0.0; n * d];
        if let Some(prev) = &input.prev_torso {
            if prev.len() != n {
                return Err(Error::ShapeMismatch {
                    what: "previous torso rows",
                    expected: n,
                    got: prev.len(),
                });
            }
            for (i, t) in prev.iter().enumerate() {
                messages_in[i * d..(i + 1) * d].copy_from_slice(&self.policy.message_from_torso(p, t));
            }
        }
        let mask = self.mask(&input.dist);
        let (mut mixed, comm) = self.comm.forward(p, &messages_in, &input.dist, &mask, self.config.mode)?;
        if self.zero_messages {
            mixed.fill(0.0);
        }
        let mut encode = Vec::with_capacity(n);
        let mut heads = Vec::with_capacity(n);
        let mut head_caches = Vec::with_capacity(n);
        let mut hidden = Vec::with_capacity(n);
        for i in 0..n {
            let (h, ec) = self.policy.encode(p, &input.obs[i], &input.hidden[i])?;
            let (out, hc) = self.policy.heads(p, &h, &mixed[i * d..(i + 1) * d])?;
            hidden.push(h);
            encode.push(ec);
            heads.push(out);
            head_caches.push(hc);
        }
        let tag = input.step_tag;
        let output = StepOutput {
            heads,
            hidden,
            messages_in: MessageMatrix {
                n,
                dim: d,
                values: messages_in.clone(),
                step_tag: tag.saturating_sub(1),
            },
            mixed: MessageMatrix {
                n,
                dim: d,
                values: mixed,
                step_tag: tag,
            },
        };
        Ok((
            output,
            StepCache {
                encode,
                heads: head_caches,
                comm,
                messages_in,
            },
        ))
    }

    /// Accumulates parameter gradients for one step given per-agent head
    /// gradients. Gradients stop at the stored hidden state and torso
    /// activations of the previous step.
    pub fn backward_step(&self, input: &StepInput, cache: &StepCache, grads: &[HeadGrads], g: &mut [f64]) {
        self.backward_step_with(self.graph.data(), input, cache, grads, g)
    }

    pub fn backward_step_with(&self, p: &[f64], input: &StepInput, cache: &StepCache, grads: &[HeadGrads], g: &mut [f64]) {
        let n = input.obs.len();
        let d = self.config.comm.dim;
        let mut dmixed = vec![0.0; n * d];
        for i in 0..n {
            let (dh, dm) = self.policy.heads_backward(p, &cache.heads[i], &grads[i], g);
            self.policy.encode_backward(p, &cache.encode[i], &dh, g, None);
            dmixed[i * d..(i + 1) * d].copy_from_slice(&dm);
        }
        if self.zero_messages || self.config.mode == CommMode::None {
            return;
        }
        let mut dmsg = vec![0.0; n * d];
        self.comm.backward(p, &cache.comm, &dmixed, g, Some(&mut dmsg));
        if let Some(prev) = &input.prev_torso {
            for (i, t) in prev.iter().enumerate() {
                let m = &cache.messages_in[i * d..(i + 1) * d];
                self.policy.message_backward(p, t, m, &dmsg[i * d..(i + 1) * d], g);
            }
        }
    }
}

/// Forward/backward pairing that refuses a backward pass without a forward.
#[derive(Debug, Default)]
pub struct Tape {
    recorded: Option<(StepInput, StepCache)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, model: &Model, input: StepInput) -> Result<StepOutput> {
        let (out, cache) = model.forward_step(&input)?;
        self.recorded = Some((input, cache));
        Ok(out)
    }

    /// Consumes the recorded forward pass.
    pub fn backward(&mut self, model: &Model, grads: &[HeadGrads], g: &mut [f64]) -> Result<()> {
        let (input, cache) = self.recorded.take().ok_or(Error::NoForwardCache)?;
        model.backward_step(&input, &cache, grads, g);
        Ok(())
    }
}
