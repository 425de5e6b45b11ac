//! Small dense layers with hand-written backward passes.
//!
//! Every layer reads its weights from a [`ParamGraph`] buffer through a
//! [`Slot`], and every backward pass accumulates (`+=`) into a gradient buffer
//! of the same layout. Input gradients are accumulated as well so callers can
//! sum contributions from several paths.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::param::{Init, ParamGraph, Slot};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`; smooth, so finite differences never straddle a kink.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_vec(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&x| silu(x)).collect()
}

/// Multiplies `d` in place by the SiLU derivative at `pre`.
pub fn silu_backward(d: &mut [f64], pre: &[f64]) {
    for (g, &x) in d.iter_mut().zip(pre) {
        *g *= silu_grad(x);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(logits.iter().map(|&l| libm::exp(l - max)).sum::<f64>());
    logits.iter().map(|&l| l - lse).collect()
}

/// `y = W x + b`, with `W` stored row-major as `[out, inp]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: Slot,
    pub bias: Option<Slot>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(graph: &mut ParamGraph, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let bound = 1.0 / libm::sqrt(inp.max(1) as f64);
        let weight = graph.add(format!("{name}.weight"), &[out, inp], Init::Uniform(bound));
        let bias = bias.then(|| graph.add(format!("{name}.bias"), &[out], Init::Zeros));
        Self {
            weight,
            bias,
            inp,
            out,
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inp);
        debug_assert_eq!(y.len(), self.out);
        let w = self.weight.of(p);
        for (yo, row) in y.iter_mut().zip(w.chunks_exact(self.inp)) {
            *yo = dot(row, x);
        }
        if let Some(b) = self.bias {
            for (yo, bo) in y.iter_mut().zip(b.of(p)) {
                *yo += bo;
            }
        }
    }

    pub fn apply(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out];
        self.forward(p, x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `g` and, if given, the input
    /// gradient into `dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        {
            let gw = self.weight.of_mut(g);
            for (grow, &d) in gw.chunks_exact_mut(self.inp).zip(dy) {
                if d != 0.0 {
                    for (gv, xv) in grow.iter_mut().zip(x) {
                        *gv += d * xv;
                    }
                }
            }
        }
        if let Some(b) = self.bias {
            for (gb, d) in b.of_mut(g).iter_mut().zip(dy) {
                *gb += d;
            }
        }
        if let Some(dx) = dx {
            let w = self.weight.of(p);
            for (row, &d) in w.chunks_exact(self.inp).zip(dy) {
                if d != 0.0 {
                    for (dxv, wv) in dx.iter_mut().zip(row) {
                        *dxv += d * wv;
                    }
                }
            }
        }
    }
}

/// Gated recurrent cell with gate order (reset, update, candidate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GruCache {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

impl GruCell {
    pub fn new(graph: &mut ParamGraph, name: &str, inp: usize, dim: usize) -> Self {
        Self {
            input: Linear::new(graph, &format!("{name}.input"), inp, 3 * dim, true),
            hidden: Linear::new(graph, &format!("{name}.hidden"), dim, 3 * dim, true),
            dim,
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], h: &[f64]) -> (Vec<f64>, GruCache) {
        let d = self.dim;
        let ax = self.input.apply(p, x);
        let ah = self.hidden.apply(p, h);
        let mut r = vec![0.0; d];
        let mut z = vec![0.0; d];
        let mut n = vec![0.0; d];
        let mut out = vec![0.0; d];
        for k in 0..d {
            r[k] = sigmoid(ax[k] + ah[k]);
            z[k] = sigmoid(ax[d + k] + ah[d + k]);
            n[k] = libm::tanh(ax[2 * d + k] + r[k] * ah[2 * d + k]);
            out[k] = (1.0 - z[k]) * n[k] + z[k] * h[k];
        }
        let hn = ah[2 * d..].to_vec();
        (out, GruCache { r, z, n, hn })
    }

    /// Backward through one cell step. Accumulates into `dx` and `dh`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        h: &[f64],
        cache: &GruCache,
        dout: &[f64],
        g: &mut [f64],
        dx: Option<&mut [f64]>,
        dh: Option<&mut [f64]>,
    ) {
        let d = self.dim;
        let mut dax = vec![0.0; 3 * d];
        let mut dah = vec![0.0; 3 * d];
        let mut dh_direct = vec![0.0; d];
        for k in 0..d {
            let (r, z, n) = (cache.r[k], cache.z[k], cache.n[k]);
            let dn = dout[k] * (1.0 - z);
            let dz = dout[k] * (h[k] - n);
            dh_direct[k] = dout[k] * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr = dn_pre * cache.hn[k];
            let dz_pre = dz * z * (1.0 - z);
            let dr_pre = dr * r * (1.0 - r);
            dax[k] = dr_pre;
            dah[k] = dr_pre;
            dax[d + k] = dz_pre;
            dah[d + k] = dz_pre;
            dax[2 * d + k] = dn_pre;
            dah[2 * d + k] = dn_pre * r;
        }
        self.input.backward(p, x, &dax, g, dx);
        match dh {
            Some(dh) => {
                self.hidden.backward(p, h, &dah, g, Some(&mut *dh));
                for (a, b) in dh.iter_mut().zip(&dh_direct) {
                    *a += b;
                }
            }
            None => self.hidden.backward(p, h, &dah, g, None),
        }
    }
}

/// Layer normalization over one vector with learned gain and bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: Slot,
    pub bias: Slot,
    pub dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(graph: &mut ParamGraph, name: &str, dim: usize) -> Self {
        Self {
            gain: graph.add(format!("{name}.gain"), &[dim], Init::Ones),
            bias: graph.add(format!("{name}.bias"), &[dim], Init::Zeros),
            dim,
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let n = self.dim as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / libm::sqrt(var + LN_EPS);
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let y = xhat
            .iter()
            .zip(self.gain.of(p))
            .zip(self.bias.of(p))
            .map(|((xh, g), b)| xh * g + b)
            .collect();
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &LayerNormCache, dy: &[f64], g: &mut [f64], dx: &mut [f64]) {
        let n = self.dim as f64;
        let gain = self.gain.of(p);
        let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
        for ((gg, d), xh) in self.gain.of_mut(g).iter_mut().zip(dy).zip(&cache.xhat) {
            *gg += d * xh;
        }
        for (gb, d) in self.bias.of_mut(g).iter_mut().zip(dy) {
            *gb += d;
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum();
        for ((o, d), xh) in dx.iter_mut().zip(&dxhat).zip(&cache.xhat) {
            *o += cache.inv_std / n * (n * d - sum_d - xh * sum_dx);
        }
    }
}
