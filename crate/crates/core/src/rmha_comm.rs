//! Relation-enhanced multi-head attention over agent messages.
//!
//! Every agent carries a message vector from the previous step. Each encoder
//! layer lets agent `i` attend to the agents inside its communication radius,
//! with the query and key of every pair shifted by an embedding of their
//! Manhattan distance:
//!
//! ```text
//! q_ij = W_q (x_i + W_1 e(d_ij))      k_ij = W_k (x_j + W_2 e(d_ji))
//! s_ij = q_ij . k_ij / sqrt(d_k) + mask_ij
//! ```
//!
//! Because the shift depends on the pair, queries and keys exist per pair.
//! They are assembled from `W_q x_i` and `W_q W_1 e(b)` for each distance
//! bucket `b`, so no `N x N x d x d` work is needed. The attended values are
//! projected by `W_o`, gated against the incoming message with a GRU cell,
//! passed through a residual feed-forward block, and layer-normalized.
//!
//! [`CommMode::GraphComm`] drops the distance terms (content-only attention)
//! and [`CommMode::None`] returns zero messages.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{silu, silu_grad, GruCache, GruCell, LayerNorm, LayerNormCache, Linear};
use crate::param::{Init, ParamGraph, Slot};
use crate::{Error, Result};

/// Additive mask value for pairs outside the communication radius.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CommMode {
    Rmha,
    GraphComm,
    None,
}

impl CommMode {
    pub fn name(self) -> &'static str {
        match self {
            CommMode::Rmha => "rmha",
            CommMode::GraphComm => "graph_comm",
            CommMode::None => "none",
        }
    }
}

impl core::str::FromStr for CommMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmha" => Ok(CommMode::Rmha),
            "graph_comm" | "graph-comm" | "graph" => Ok(CommMode::GraphComm),
            "none" | "mappo" => Ok(CommMode::None),
            other => Err(Error::InvalidConfig(format!("unknown communication mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommConfig {
    /// Message dimension `d`.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub buckets: usize,
    /// Feed-forward hidden width is `ffn_mult * dim`.
    pub ffn_mult: usize,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 2,
            buckets: 16,
            ffn_mult: 4,
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "message dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.buckets == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig("buckets and layers must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Per-agent message rows tagged with the step that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageMatrix {
    pub n: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub step_tag: usize,
}

impl MessageMatrix {
    pub fn zeros(n: usize, dim: usize, step_tag: usize) -> Self {
        Self {
            n,
            dim,
            values: vec![0.0; n * dim],
            step_tag,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Additive `N x N` attention mask: `0` for admitted pairs, the sentinel
/// otherwise. The diagonal is always admitted.
#[derive(Clone, Debug, PartialEq)]
pub struct CommMask {
    pub n: usize,
    pub values: Vec<f64>,
}

impl CommMask {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn is_open(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == 0.0
    }
}

pub fn build_mask(dist: &[Vec<u32>], radius: u32) -> CommMask {
    build_mask_with(dist, radius, MASK_SENTINEL)
}

pub fn build_mask_with(dist: &[Vec<u32>], radius: u32, sentinel: f64) -> CommMask {
    let n = dist.len();
    let mut values = vec![sentinel; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || dist[i][j] <= radius {
                values[i * n + j] = 0.0;
            }
        }
    }
    CommMask { n, values }
}

/// Learned bucketed distance table plus the query-side (`W_1`) and key-side
/// (`W_2`) projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistanceEmbedding {
    pub table: Slot,
    pub side_q: Linear,
    pub side_k: Linear,
    pub buckets: usize,
    pub dim: usize,
}

impl DistanceEmbedding {
    pub fn new(graph: &mut ParamGraph, name: &str, buckets: usize, dim: usize) -> Self {
        Self {
            table: graph.add(format!("{name}.table"), &[buckets, dim], Init::Uniform(0.5)),
            side_q: Linear::new(graph, &format!("{name}.side_q"), dim, dim, false),
            side_k: Linear::new(graph, &format!("{name}.side_k"), dim, dim, false),
            buckets,
            dim,
        }
    }

    pub fn bucket(&self, distance: u32) -> usize {
        (distance as usize).min(self.buckets - 1)
    }

    fn row<'a>(&self, p: &'a [f64], bucket: usize) -> &'a [f64] {
        &self.table.of(p)[bucket * self.dim..(bucket + 1) * self.dim]
    }

    /// Query-side and key-side embeddings, each `N x N x d`:
    /// `side[i][j] = W · table[bucket(D[i][j])]`.
    pub fn embed(&self, p: &[f64], dist: &[Vec<u32>]) -> (Vec<f64>, Vec<f64>) {
        let n = dist.len();
        let d = self.dim;
        let mut q = vec![0.0; n * n * d];
        let mut k = vec![0.0; n * n * d];
        for i in 0..n {
            for j in 0..n {
                let row = self.row(p, self.bucket(dist[i][j]));
                let at = (i * n + j) * d;
                self.side_q.forward(p, row, &mut q[at..at + d]);
                self.side_k.forward(p, row, &mut k[at..at + d]);
            }
        }
        (q, k)
    }

    /// Backward of [`Self::embed`] given gradients of both outputs.
    pub fn embed_backward(&self, p: &[f64], dist: &[Vec<u32>], dq: &[f64], dk: &[f64], g: &mut [f64]) {
        let n = dist.len();
        let d = self.dim;
        let mut drow = vec![0.0; d];
        for i in 0..n {
            for j in 0..n {
                let b = self.bucket(dist[i][j]);
                let row = self.row(p, b);
                let at = (i * n + j) * d;
                drow.fill(0.0);
                self.side_q.backward(p, row, &dq[at..at + d], g, Some(&mut drow));
                self.side_k.backward(p, row, &dk[at..at + d], g, Some(&mut drow));
                for (t, v) in self.table.of_mut(g)[b * d..(b + 1) * d].iter_mut().zip(&drow) {
                    *t += v;
                }
            }
        }
    }
}

/// Parameters of one encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub gate: GruCell,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm: LayerNorm,
}

impl AttentionLayer {
    fn new(graph: &mut ParamGraph, name: &str, cfg: &CommConfig) -> Self {
        let d = cfg.dim;
        Self {
            wq: Linear::new(graph, &format!("{name}.wq"), d, d, false),
            wk: Linear::new(graph, &format!("{name}.wk"), d, d, false),
            wv: Linear::new(graph, &format!("{name}.wv"), d, d, false),
            wo: Linear::new(graph, &format!("{name}.wo"), d, d, false),
            gate: GruCell::new(graph, &format!("{name}.gate"), d, d),
            ffn_in: Linear::new(graph, &format!("{name}.ffn_in"), d, cfg.ffn_mult * d, true),
            ffn_out: Linear::new(graph, &format!("{name}.ffn_out"), cfg.ffn_mult * d, d, true),
            norm: LayerNorm::new(graph, &format!("{name}.norm"), d),
        }
    }
}

/// Per-bucket embedding rows `W_1 e(b)` and `W_2 e(b)` for the buckets in use.
#[derive(Clone, Debug, Default)]
struct BucketRows {
    used: Vec<usize>,
    q: Vec<f64>,
    k: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
struct Projections {
    qx: Vec<f64>,
    kx: Vec<f64>,
    v: Vec<f64>,
    /// `W_q W_1 e(b)` per bucket (rows of unused buckets stay zero).
    qe: Vec<f64>,
    ke: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
struct LayerCache {
    x: Vec<f64>,
    proj: Projections,
    alpha: Vec<f64>,
    concat: Vec<f64>,
    att: Vec<f64>,
    gru: Vec<GruCache>,
    gated: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    norm: Vec<LayerNormCache>,
}

/// Activations retained by [`RmhaComm::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct CommCache {
    mode: CommMode,
    n: usize,
    bucket: Vec<usize>,
    rows: BucketRows,
    layers: Vec<LayerCache>,
}

impl CommCache {
    /// Attention weights of `layer` laid out as `[head][i][j]`; empty in
    /// silent mode.
    pub fn attention(&self, layer: usize) -> &[f64] {
        self.layers.get(layer).map_or(&[], |l| &l.alpha)
    }
}

/// The full communication block: shared distance embedding plus `L` layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RmhaComm {
    pub config: CommConfig,
    pub embedding: DistanceEmbedding,
    pub layers: Vec<AttentionLayer>,
}

impl RmhaComm {
    pub fn new(graph: &mut ParamGraph, name: &str, config: CommConfig) -> Result<Self> {
        config.validate()?;
        let embedding = DistanceEmbedding::new(graph, &format!("{name}.distance"), config.buckets, config.dim);
        let layers = (0..config.layers)
            .map(|l| AttentionLayer::new(graph, &format!("{name}.layer{l}"), &config))
            .collect();
        Ok(Self {
            config,
            embedding,
            layers,
        })
    }

    fn check_shapes(&self, messages: &[f64], dist: &[Vec<u32>], mask: &CommMask) -> Result<usize> {
        let d = self.config.dim;
        let n = dist.len();
        if messages.len() != n * d {
            return Err(Error::ShapeMismatch {
                what: "message matrix",
                expected: n * d,
                got: messages.len(),
            });
        }
        if mask.n != n {
            return Err(Error::ShapeMismatch {
                what: "mask",
                expected: n,
                got: mask.n,
            });
        }
        if let Some(row) = dist.iter().find(|r| r.len() != n) {
            return Err(Error::ShapeMismatch {
                what: "distance matrix row",
                expected: n,
                got: row.len(),
            });
        }
        Ok(n)
    }

    fn bucket_rows(&self, p: &[f64], bucket: &[usize]) -> BucketRows {
        let d = self.config.dim;
        let b = self.config.buckets;
        let mut used: Vec<usize> = bucket.to_vec();
        used.sort_unstable();
        used.dedup();
        let mut q = vec![0.0; b * d];
        let mut k = vec![0.0; b * d];
        for &u in &used {
            let row = self.embedding.row(p, u);
            self.embedding.side_q.forward(p, row, &mut q[u * d..(u + 1) * d]);
            self.embedding.side_k.forward(p, row, &mut k[u * d..(u + 1) * d]);
        }
        BucketRows { used, q, k }
    }

    fn project(&self, layer: &AttentionLayer, p: &[f64], x: &[f64], rows: Option<&BucketRows>) -> Projections {
        let d = self.config.dim;
        let n = x.len() / d;
        let mut proj = Projections {
            qx: vec![0.0; n * d],
            kx: vec![0.0; n * d],
            v: vec![0.0; n * d],
            qe: Vec::new(),
            ke: Vec::new(),
        };
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            layer.wq.forward(p, xi, &mut proj.qx[i * d..(i + 1) * d]);
            layer.wk.forward(p, xi, &mut proj.kx[i * d..(i + 1) * d]);
            layer.wv.forward(p, xi, &mut proj.v[i * d..(i + 1) * d]);
        }
        if let Some(rows) = rows {
            let b = self.config.buckets;
            proj.qe = vec![0.0; b * d];
            proj.ke = vec![0.0; b * d];
            for &u in &rows.used {
                layer.wq.forward(p, &rows.q[u * d..(u + 1) * d], &mut proj.qe[u * d..(u + 1) * d]);
                layer.wk.forward(p, &rows.k[u * d..(u + 1) * d], &mut proj.ke[u * d..(u + 1) * d]);
            }
        }
        proj
    }

    /// Scaled, masked, pre-softmax scores laid out as `[i][j][head]`.
    fn scores(&self, proj: &Projections, bucket: &[usize], mask: &CommMask, n: usize) -> Vec<f64> {
        let d = self.config.dim;
        let h = self.config.heads;
        let dk = self.config.head_dim();
        let scale = 1.0 / libm::sqrt(dk as f64);
        let relational = !proj.qe.is_empty();
        let mut out = vec![0.0; n * n * h];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        for i in 0..n {
            for j in 0..n {
                q.copy_from_slice(&proj.qx[i * d..(i + 1) * d]);
                k.copy_from_slice(&proj.kx[j * d..(j + 1) * d]);
                if relational {
                    let bq = bucket[i * n + j];
                    let bk = bucket[j * n + i];
                    for t in 0..d {
                        q[t] += proj.qe[bq * d + t];
                        k[t] += proj.ke[bk * d + t];
                    }
                }
                for head in 0..h {
                    let s = head * dk;
                    let dot: f64 = (s..s + dk).map(|t| q[t] * k[t]).sum();
                    out[(i * n + j) * h + head] = dot * scale + mask.get(i, j);
                }
            }
        }
        out
    }

    fn buckets_of(&self, dist: &[Vec<u32>]) -> Vec<usize> {
        dist.iter().flat_map(|row| row.iter().map(|&x| self.embedding.bucket(x))).collect()
    }

    /// First-layer attention scores `[i][j][head]`, scaled by `1/sqrt(d_k)`
    /// with the mask added.
    pub fn attention_scores(
        &self,
        p: &[f64],
        messages: &MessageMatrix,
        dist: &[Vec<u32>],
        mask: &CommMask,
        mode: CommMode,
    ) -> Result<Vec<f64>> {
        let n = self.check_shapes(&messages.values, dist, mask)?;
        let bucket = self.buckets_of(dist);
        let rows = (mode == CommMode::Rmha).then(|| self.bucket_rows(p, &bucket));
        let proj = self.project(&self.layers[0], p, &messages.values, rows.as_ref());
        Ok(self.scores(&proj, &bucket, mask, n))
    }

    /// Runs all layers and returns the mixed messages.
    pub fn attend(
        &self,
        p: &[f64],
        messages: &MessageMatrix,
        dist: &[Vec<u32>],
        mask: &CommMask,
        mode: CommMode,
    ) -> Result<MessageMatrix> {
        let (values, _) = self.forward(p, &messages.values, dist, mask, mode)?;
        Ok(MessageMatrix {
            n: messages.n,
            dim: messages.dim,
            values,
            step_tag: messages.step_tag,
        })
    }

    /// Forward pass over a flat `N x d` message buffer.
    pub fn forward(
        &self,
        p: &[f64],
        messages: &[f64],
        dist: &[Vec<u32>],
        mask: &CommMask,
        mode: CommMode,
    ) -> Result<(Vec<f64>, CommCache)> {
        let n = self.check_shapes(messages, dist, mask)?;
        let d = self.config.dim;
        let h = self.config.heads;
        let dk = self.config.head_dim();
        let bucket = self.buckets_of(dist);
        let mut cache = CommCache {
            mode,
            n,
            bucket,
            rows: BucketRows::default(),
            layers: Vec::new(),
        };
        if mode == CommMode::None {
            return Ok((vec![0.0; n * d], cache));
        }
        if mode == CommMode::Rmha {
            cache.rows = self.bucket_rows(p, &cache.bucket);
        }
        let hidden = self.config.ffn_mult * d;
        let mut x = messages.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let proj = self.project(layer, p, &x, (mode == CommMode::Rmha).then_some(&cache.rows));
            let scores = self.scores(&proj, &cache.bucket, mask, n);
            let mut alpha = vec![0.0; h * n * n];
            let mut concat = vec![0.0; n * d];
            for head in 0..h {
                for i in 0..n {
                    let row = &mut alpha[(head * n + i) * n..(head * n + i + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        row[j] = scores[(i * n + j) * h + head];
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for a in row.iter_mut() {
                        *a = libm::exp(*a - max);
                        sum += *a;
                    }
                    for a in row.iter_mut() {
                        *a /= sum;
                    }
                    let out = &mut concat[i * d + head * dk..i * d + (head + 1) * dk];
                    for (j, &a) in row.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        for (o, v) in out.iter_mut().zip(&proj.v[j * d + head * dk..j * d + (head + 1) * dk]) {
                            *o += a * v;
                        }
                    }
                }
            }
            let mut att = vec![0.0; n * d];
            let mut gated = vec![0.0; n * d];
            let mut ffn_pre = vec![0.0; n * hidden];
            let mut ffn_act = vec![0.0; n * hidden];
            let mut gru = Vec::with_capacity(n);
            let mut norm = Vec::with_capacity(n);
            let mut y = vec![0.0; n * d];
            let mut f = vec![0.0; d];
            for i in 0..n {
                let xi = &x[i * d..(i + 1) * d];
                layer.wo.forward(p, &concat[i * d..(i + 1) * d], &mut att[i * d..(i + 1) * d]);
                let (g, gc) = layer.gate.forward(p, &att[i * d..(i + 1) * d], xi);
                gated[i * d..(i + 1) * d].copy_from_slice(&g);
                gru.push(gc);
                let pre = &mut ffn_pre[i * hidden..(i + 1) * hidden];
                layer.ffn_in.forward(p, &g, pre);
                let act = &mut ffn_act[i * hidden..(i + 1) * hidden];
                for (a, z) in act.iter_mut().zip(pre.iter()) {
                    *a = silu(*z);
                }
                layer.ffn_out.forward(p, act, &mut f);
                for (fv, gv) in f.iter_mut().zip(&g) {
                    *fv += gv;
                }
                let (yi, nc) = layer.norm.forward(p, &f);
                y[i * d..(i + 1) * d].copy_from_slice(&yi);
                norm.push(nc);
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            cache.layers.push(LayerCache {
                x: core::mem::replace(&mut x, y),
                proj,
                alpha,
                concat,
                att,
                gru,
                gated,
                ffn_pre,
                ffn_act,
                norm,
            });
        }
        Ok((x, cache))
    }

    /// Accumulates parameter gradients into `g` and, when given, the gradient
    /// with respect to the input messages into `dmessages`.
    pub fn backward(&self, p: &[f64], cache: &CommCache, dout: &[f64], g: &mut [f64], dmessages: Option<&mut [f64]>) {
        if cache.mode == CommMode::None {
            return;
        }
        let n = cache.n;
        let d = self.config.dim;
        let h = self.config.heads;
        let dk = self.config.head_dim();
        let b = self.config.buckets;
        let hidden = self.config.ffn_mult * d;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let relational = cache.mode == CommMode::Rmha;
        let mut deq = vec![0.0; b * d];
        let mut dek = vec![0.0; b * d];
        let mut dy = dout.to_vec();

        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let mut dx = vec![0.0; n * d];
            let mut dconcat = vec![0.0; n * d];
            let mut dr = vec![0.0; d];
            let mut dact = vec![0.0; hidden];
            let mut da = vec![0.0; d];
            for i in 0..n {
                let sl = i * d..(i + 1) * d;
                let hl = i * hidden..(i + 1) * hidden;
                dr.fill(0.0);
                layer.norm.backward(p, &lc.norm[i], &dy[sl.clone()], g, &mut dr);
                let mut dg = dr.clone();
                dact.fill(0.0);
                layer.ffn_out.backward(p, &lc.ffn_act[hl.clone()], &dr, g, Some(&mut dact));
                for (da_, z) in dact.iter_mut().zip(&lc.ffn_pre[hl]) {
                    *da_ *= silu_grad(*z);
                }
                layer.ffn_in.backward(p, &lc.gated[sl.clone()], &dact, g, Some(&mut dg));
                da.fill(0.0);
                layer.gate.backward(
                    p,
                    &lc.att[sl.clone()],
                    &lc.x[sl.clone()],
                    &lc.gru[i],
                    &dg,
                    g,
                    Some(&mut da),
                    Some(&mut dx[sl.clone()]),
                );
                layer.wo.backward(p, &lc.concat[sl.clone()], &da, g, Some(&mut dconcat[sl]));
            }

            let proj = &lc.proj;
            let mut dv = vec![0.0; n * d];
            let mut dqx = vec![0.0; n * d];
            let mut dkx = vec![0.0; n * d];
            let mut dqe = vec![0.0; if relational { b * d } else { 0 }];
            let mut dke = vec![0.0; if relational { b * d } else { 0 }];
            let mut dalpha = vec![0.0; n];
            for head in 0..h {
                let hs = head * dk;
                for i in 0..n {
                    let alpha = &lc.alpha[(head * n + i) * n..(head * n + i + 1) * n];
                    let dc = &dconcat[i * d + hs..i * d + hs + dk];
                    let mut weighted = 0.0;
                    for j in 0..n {
                        let vj = &proj.v[j * d + hs..j * d + hs + dk];
                        dalpha[j] = dc.iter().zip(vj).map(|(a, b)| a * b).sum();
                        weighted += alpha[j] * dalpha[j];
                        if alpha[j] != 0.0 {
                            for (o, c) in dv[j * d + hs..j * d + hs + dk].iter_mut().zip(dc) {
                                *o += alpha[j] * c;
                            }
                        }
                    }
                    for j in 0..n {
                        if alpha[j] == 0.0 {
                            continue;
                        }
                        let ds = alpha[j] * (dalpha[j] - weighted) * scale;
                        let (bq, bk) = (cache.bucket[i * n + j], cache.bucket[j * n + i]);
                        for t in hs..hs + dk {
                            let mut q = proj.qx[i * d + t];
                            let mut k = proj.kx[j * d + t];
                            if relational {
                                q += proj.qe[bq * d + t];
                                k += proj.ke[bk * d + t];
                            }
                            let dq = ds * k;
                            let dkv = ds * q;
                            dqx[i * d + t] += dq;
                            dkx[j * d + t] += dkv;
                            if relational {
                                dqe[bq * d + t] += dq;
                                dke[bk * d + t] += dkv;
                            }
                        }
                    }
                }
            }
            for i in 0..n {
                let sl = i * d..(i + 1) * d;
                let xi = &lc.x[sl.clone()];
                layer.wq.backward(p, xi, &dqx[sl.clone()], g, Some(&mut dx[sl.clone()]));
                layer.wk.backward(p, xi, &dkx[sl.clone()], g, Some(&mut dx[sl.clone()]));
                layer.wv.backward(p, xi, &dv[sl.clone()], g, Some(&mut dx[sl]));
            }
            if relational {
                for &u in &cache.rows.used {
                    let sl = u * d..(u + 1) * d;
                    layer.wq.backward(p, &cache.rows.q[sl.clone()], &dqe[sl.clone()], g, Some(&mut deq[sl.clone()]));
                    layer.wk.backward(p, &cache.rows.k[sl.clone()], &dke[sl.clone()], g, Some(&mut dek[sl]));
                }
            }
            dy = dx;
        }

        if relational {
            let emb = &self.embedding;
            for &u in &cache.rows.used {
                let sl = u * d..(u + 1) * d;
                let row = emb.row(p, u).to_vec();
                let mut drow = vec![0.0; d];
                emb.side_q.backward(p, &row, &deq[sl.clone()], g, Some(&mut drow));
                emb.side_k.backward(p, &row, &dek[sl], g, Some(&mut drow));
                let table = emb.table.of_mut(g);
                for (t, v) in table[u * d..(u + 1) * d].iter_mut().zip(&drow) {
                    *t += v;
                }
            }
        }

        if let Some(dm) = dmessages {
            for (o, v) in dm.iter_mut().zip(&dy) {
                *o += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(cfg: CommConfig, seed: u64) -> (RmhaComm, ParamGraph) {
        let mut graph = ParamGraph::new();
        let comm = RmhaComm::new(&mut graph, "comm", cfg).unwrap();
        graph.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        (comm, graph)
    }

    fn small() -> CommConfig {
        CommConfig {
            dim: 8,
            heads: 2,
            layers: 2,
            buckets: 16,
            ffn_mult: 4,
        }
    }

    #[test]
    fn mask_examples() {
        let one = build_mask(&[vec![0]], 0);
        assert_eq!(one.values, vec![0.0]);
        let d = vec![vec![0, 3], vec![3, 0]];
        let r0 = build_mask(&d, 0);
        assert!(r0.is_open(0, 0) && r0.is_open(1, 1) && !r0.is_open(0, 1));
        assert_eq!(build_mask(&d, 2).get(0, 1), MASK_SENTINEL);
        assert_eq!(build_mask(&d, 3).get(0, 1), 0.0);
    }

    #[test]
    fn buckets_clamp() {
        let (comm, _) = block(small(), 0);
        assert_eq!(comm.embedding.bucket(3), 3);
        assert_eq!(comm.embedding.bucket(15), 15);
        assert_eq!(comm.embedding.bucket(400), 15);
    }

    #[test]
    fn zero_distances_embed_to_first_row() {
        let (comm, graph) = block(small(), 1);
        let p = graph.data();
        let (q, k) = comm.embedding.embed(p, &[vec![0, 0], vec![0, 0]]);
        let row = comm.embedding.row(p, 0);
        let expect_q = comm.embedding.side_q.apply(p, row);
        let expect_k = comm.embedding.side_k.apply(p, row);
        for pair in 0..4 {
            assert_eq!(&q[pair * 8..(pair + 1) * 8], &expect_q[..]);
            assert_eq!(&k[pair * 8..(pair + 1) * 8], &expect_k[..]);
        }
    }

    #[test]
    fn zero_parameters_give_uniform_attention() {
        let mut graph = ParamGraph::new();
        let comm = RmhaComm::new(&mut graph, "comm", small()).unwrap();
        let msgs = MessageMatrix {
            n: 3,
            dim: 8,
            values: (0..24).map(|v| v as f64 * 0.1).collect(),
            step_tag: 0,
        };
        let dist = vec![vec![0, 1, 9], vec![1, 0, 2], vec![9, 2, 0]];
        let mask = build_mask(&dist, 2);
        let s = comm.attention_scores(graph.data(), &msgs, &dist, &mask, CommMode::Rmha).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for h in 0..2 {
                    let expect = if mask.is_open(i, j) { 0.0 } else { MASK_SENTINEL };
                    assert_eq!(s[(i * 3 + j) * 2 + h], expect);
                }
            }
        }
    }

    #[test]
    fn none_mode_outputs_zeros() {
        let (comm, graph) = block(small(), 2);
        let msgs = MessageMatrix {
            n: 2,
            dim: 8,
            values: vec![0.7; 16],
            step_tag: 4,
        };
        let dist = vec![vec![0, 1], vec![1, 0]];
        let out = comm.attend(graph.data(), &msgs, &dist, &build_mask(&dist, 40), CommMode::None).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
        assert_eq!(out.step_tag, 4);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (comm, graph) = block(small(), 3);
        let dist = vec![vec![0, 1], vec![1, 0]];
        let err = comm.forward(graph.data(), &[0.0; 8], &dist, &build_mask(&dist, 1), CommMode::Rmha);
        assert!(matches!(err, Err(Error::ShapeMismatch { what: "message matrix", .. })));
    }

    #[test]
    fn non_finite_input_is_reported_with_layer() {
        let (comm, graph) = block(small(), 3);
        let dist = vec![vec![0]];
        let mut msgs = vec![0.0; 8];
        msgs[0] = f64::NAN;
        let err = comm.forward(graph.data(), &msgs, &dist, &build_mask(&dist, 1), CommMode::GraphComm);
        assert_eq!(err.unwrap_err(), Error::NonFinite { layer: 0 });
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut graph = ParamGraph::new();
        let cfg = CommConfig { heads: 3, ..small() };
        assert!(RmhaComm::new(&mut graph, "c", cfg).is_err());
    }
}
