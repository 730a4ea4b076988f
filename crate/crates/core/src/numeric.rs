//! Dense numeric kernels shared by every stage.
//!
//! Parameters and activations are `f32`; every reduction (dot products,
//! normalization statistics, softmax sums, entropies) accumulates in `f64`.
//! Logits, probabilities and losses are handed around as `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries drawn from N(0, std²).
    pub fn random_normal(rows: usize, cols: usize, std: f32, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() as f32 * std).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · otherᵀ`, i.e. `out[i][j] = dot(self.row(i), other.row(j))`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = out.row_mut(i);
            for (j, d) in dst.iter_mut().enumerate() {
                *d = dot(a, other.row(j)) as f32;
            }
        }
        out
    }

    /// `self · otherᵀ + bias` with `bias` broadcast along rows.
    pub fn affine(&self, weight: &Matrix, bias: &[f32]) -> Matrix {
        assert_eq!(weight.rows, bias.len());
        let mut out = self.matmul_t(weight);
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Dot product with `f64` accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] as f64 * b[j] as f64;
        acc[1] += a[j + 1] as f64 * b[j + 1] as f64;
        acc[2] += a[j + 2] as f64 * b[j + 2] as f64;
        acc[3] += a[j + 3] as f64 * b[j + 3] as f64;
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] as f64 * b[j] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Logits of a linear classifier `weight · x + bias` (weight is classes × dim).
pub fn linear_logits(weight: &Matrix, bias: &[f32], x: &[f32]) -> Vec<f64> {
    (0..weight.rows())
        .map(|c| dot(weight.row(c), x) + bias[c] as f64)
        .collect()
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Shannon entropy in nats. Zero-probability terms contribute 0.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("entropy of an empty vector"));
    }
    if let Some(v) = p.iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(Error::invalid(format!("negative probability {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    h.max(0.0)
}

/// Entropy of `softmax(logits)` as `ln Σ e^(z-m) - Σ p (z-m)`. Saturated
/// logits contribute exactly 0 and all-equal logits give exactly `ln C`.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weighted: f64 = exps
        .iter()
        .zip(logits)
        .map(|(&e, &z)| e * (z - max))
        .sum::<f64>()
        / sum;
    (sum.ln() - weighted).max(0.0)
}

/// Mean that is exact when all values are equal.
pub(crate) fn stable_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut iter = values.into_iter();
    let Some(first) = iter.next() else {
        return f64::NAN;
    };
    let mut n = 1usize;
    let mut dev = 0.0;
    for v in iter {
        dev += v - first;
        n += 1;
    }
    first + dev / n as f64
}

/// Layer normalization of one vector; statistics use the biased variance.
pub fn layer_norm(v: &[f32], gain: &[f32], bias: &[f32], eps: f64) -> Result<Vec<f32>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(Error::invalid(format!(
            "layer_norm length mismatch: input {}, gain {}, bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if v.is_empty() {
        return Err(Error::invalid("layer_norm of an empty vector"));
    }
    let mut out = vec![0.0; v.len()];
    layer_norm_into(v, gain, bias, eps, &mut out);
    Ok(out)
}

pub(crate) fn layer_norm_into(v: &[f32], gain: &[f32], bias: &[f32], eps: f64, out: &mut [f32]) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (((o, &x), &g), &b) in out.iter_mut().zip(v).zip(gain).zip(bias) {
        *o = ((x as f64 - mean) * inv * g as f64 + b as f64) as f32;
    }
}

/// `-ln softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(cross_entropy_unchecked(logits, target))
}

pub(crate) fn cross_entropy_unchecked(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    (max + sum.ln() - logits[target]).max(0.0)
}

/// `params - lr * grads`, elementwise.
pub fn sgd_step(params: &Matrix, grads: &Matrix, lr: f64) -> Result<Matrix> {
    if params.shape() != grads.shape() {
        return Err(Error::invalid(format!(
            "sgd_step shape mismatch: params {:?}, grads {:?}",
            params.shape(),
            grads.shape()
        )));
    }
    let data = params
        .data
        .iter()
        .zip(&grads.data)
        .map(|(&p, &g)| (p as f64 - lr * g as f64) as f32)
        .collect();
    Ok(Matrix {
        rows: params.rows,
        cols: params.cols,
        data,
    })
}

/// Update rule applied to flat parameter buffers during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Per-buffer optimizer state. One instance per parameter buffer.
#[derive(Debug, Clone)]
pub struct OptimState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl OptimState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: Optimizer, len: usize) -> Self {
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam => (vec![0.0; len], vec![0.0; len]),
        };
        Self { kind, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p = (*p as f64 - lr * g) as f32;
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
                let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
                for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    *p = (*p as f64 - lr * mhat / (vhat.sqrt() + Self::EPS)) as f32;
                }
            }
        }
    }
}

/// Portable seeded generator (ChaCha8): identical seeds give identical
/// streams on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a named sub-stream of this seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, inner: rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// FNV-1a over the bit patterns of a parameter stream. Used to assert that
/// frozen components are never mutated.
pub fn hash_f32s<'a>(chunks: impl IntoIterator<Item = &'a [f32]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for chunk in chunks {
        for v in chunk {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}
