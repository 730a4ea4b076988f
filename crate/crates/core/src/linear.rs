//! Linear softmax classifier over frame vectors, shared by the teacher head
//! and the exit branches.

use crate::error::{Error, Result};
use crate::numeric::{
    cross_entropy_unchecked, hash_f32s, linear_logits, softmax_entropy, softmax_unchecked, Matrix,
    OptimState, Optimizer, SeededRng,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

/// Gradients of the mean frame cross-entropy, in `f64`.
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    pub fn random(classes: usize, dim: usize, std: f32, rng: &mut SeededRng) -> Self {
        Self {
            weight: Matrix::random_normal(classes, dim, std, rng),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        linear_logits(&self.weight, &self.bias, x)
    }

    /// Lowest index wins ties.
    pub fn argmax(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }

    /// Mean over frames of the posterior entropy.
    pub fn mean_entropy(&self, frames: &Matrix) -> f64 {
        crate::numeric::stable_mean((0..frames.rows()).map(|t| softmax_entropy(&self.logits(frames.row(t)))))
    }

    pub fn param_hash(&self) -> u64 {
        hash_f32s([self.weight.data(), self.bias.as_slice()])
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    /// Mean frame cross-entropy of one sequence.
    pub fn sequence_loss(&self, frames: &Matrix, labels: &[u32]) -> f64 {
        let total: f64 = (0..frames.rows())
            .map(|t| cross_entropy_unchecked(&self.logits(frames.row(t)), labels[t] as usize))
            .sum();
        total / frames.rows() as f64
    }

    /// Loss `(1/B) Σ_b (1/T_b) Σ_t CE(W h_t + b, y_t)` and its gradient.
    pub fn batch_grad(&self, batch: &[(&Matrix, &[u32])]) -> (f64, LinearGrads) {
        let c = self.classes();
        let d = self.dim();
        let mut gw = vec![0.0f64; c * d];
        let mut gb = vec![0.0f64; c];
        let mut loss = 0.0;
        let b = batch.len() as f64;
        for (frames, labels) in batch {
            let t_len = frames.rows() as f64;
            let scale = 1.0 / (b * t_len);
            for t in 0..frames.rows() {
                let x = frames.row(t);
                let logits = self.logits(x);
                let y = labels[t] as usize;
                loss += cross_entropy_unchecked(&logits, y) * scale;
                let mut p = softmax_unchecked(&logits);
                p[y] -= 1.0;
                for (k, dz) in p.iter().enumerate() {
                    let g = dz * scale;
                    gb[k] += g;
                    let row = &mut gw[k * d..(k + 1) * d];
                    for (gi, xi) in row.iter_mut().zip(x) {
                        *gi += g * *xi as f64;
                    }
                }
            }
        }
        (
            loss,
            LinearGrads {
                weight: gw,
                bias: gb,
            },
        )
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Optimizer state for one linear head.
pub(crate) struct HeadOptimizer {
    weight: OptimState,
    bias: OptimState,
}

impl HeadOptimizer {
    pub fn new(kind: Optimizer, head: &LinearHead) -> Self {
        Self {
            weight: OptimState::new(kind, head.weight.data().len()),
            bias: OptimState::new(kind, head.bias.len()),
        }
    }

    pub fn step(&mut self, head: &mut LinearHead, grads: &LinearGrads, lr: f64) {
        self.weight.step(head.weight.data_mut(), &grads.weight, lr);
        self.bias.step(&mut head.bias, &grads.bias, lr);
    }
}

/// Settings shared by the minibatch training loops.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Deterministic epoch-shuffled minibatch index stream.
pub(crate) struct BatchSampler {
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self {
            rng,
            order,
            cursor: 0,
            batch: batch.min(n).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
