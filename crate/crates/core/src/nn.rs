//! Minimal dense layers, activations and optimizers in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { in_dim, out_dim, w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim] }
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut l = Linear::zeros(in_dim, out_dim);
        l.w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        l.b.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        l
    }

    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for (o, (row, b)) in y.iter_mut().zip(self.w.chunks_exact(self.in_dim).zip(&self.b)) {
            *o = b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim];
        self.forward_into(x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and adds `W^T dy` into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            let row = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (r, xi) in row.iter_mut().zip(x) {
                *r += g * xi;
            }
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Linear) {
        self.w.iter_mut().zip(&other.w).for_each(|(a, b)| *a += b);
        self.b.iter_mut().zip(&other.b).for_each(|(a, b)| *a += b);
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|v| v.is_finite())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Sinusoidal embedding of a diffusion step index.
pub fn timestep_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = k as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-tensor optimizer state. Moments are allocated lazily on first use.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, m: Vec::new(), v: Vec::new(), steps: Vec::new() }
    }

    /// Updates tensor `slot` in place. Each slot keeps its own step count, so
    /// slots that are skipped in a step are left untouched.
    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                while self.m.len() <= slot {
                    self.m.push(Vec::new());
                    self.v.push(Vec::new());
                    self.steps.push(0);
                }
                if self.m[slot].is_empty() {
                    self.m[slot] = vec![0.0; params.len()];
                    self.v[slot] = vec![0.0; params.len()];
                }
                self.steps[slot] += 1;
                let t = self.steps[slot] as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}
