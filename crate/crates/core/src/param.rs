//! Flat parameter storage shared by every trainable block.
//!
//! All tensors of a model live in one contiguous `Vec<f64>`. Layers keep a
//! [`Slot`] into that buffer, gradients use an identically laid out buffer,
//! and checkpoints walk [`ParamGraph::specs`] in insertion order.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

/// A contiguous range of the parameter buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
    pub init: Init,
}

/// Named, shaped parameter tensors backed by one flat buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGraph {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-filled tensor and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.data.len(),
            len,
        };
        self.data.resize(self.data.len() + len, 0.0);
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            slot,
            init,
        });
        slot
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| s.slot.of(&self.data))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let slot = self.spec(name)?.slot;
        Some(slot.of_mut(&mut self.data))
    }

    /// Fills every tensor according to its registered [`Init`].
    pub fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for spec in &self.specs {
            let values = spec.slot.of_mut(&mut self.data);
            match spec.init {
                Init::Zeros => values.fill(0.0),
                Init::Ones => values.fill(1.0),
                Init::Uniform(bound) => {
                    for v in values {
                        *v = rng.random_range(-bound..=bound);
                    }
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Global L2 norm of a gradient buffer.
pub fn global_norm(grad: &[f64]) -> f64 {
    libm::sqrt(grad.iter().map(|g| g * g).sum())
}

/// Rescales `grad` in place so its global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Adaptive moment estimation over a flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }
}
