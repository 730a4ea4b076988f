//! Frozen transformer encoder that exposes every layer's hidden states.
//!
//! The stack is pre-norm: each block computes
//! `h += Attn(LN1(h))` then `h += FFN(LN2(h))`. Inputs are projected from
//! `input_dim` to `model_dim` and a sinusoidal position table is added.
//! Layer indices in the public API are 1-based, matching exit-layer numbering.

use std::ops::ControlFlow;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, hash_f32s, layer_norm_into, Matrix, SeededRng, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_frames: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            max_frames: 64,
            input_dim: 16,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_frames", self.max_frames),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.num_layers < 2 {
            return Err(Error::config("num_layers must be at least 2"));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

// Initialization scales. Query and key projections start from the same
// draw so attention scores behave like a content/position similarity kernel.
const QK_STD: f32 = 0.2;
const OUT_GAIN: f32 = 0.5;
const FFN_GAIN: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Matrix,
    pub bq: Vec<f32>,
    pub wk: Matrix,
    pub bk: Vec<f32>,
    pub wv: Matrix,
    pub bv: Vec<f32>,
    pub wo: Matrix,
    pub bo: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

impl Block {
    fn init(cfg: &EncoderConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let inv_d = 1.0 / (d as f32).sqrt();
        let wq = Matrix::random_normal(d, d, QK_STD, rng);
        let wk = wq.clone();
        Self {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            wq,
            bq: vec![0.0; d],
            wk,
            bk: vec![0.0; d],
            wv: Matrix::random_normal(d, d, inv_d, rng),
            bv: vec![0.0; d],
            wo: Matrix::random_normal(d, d, inv_d * OUT_GAIN, rng),
            bo: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w1: Matrix::random_normal(f, d, inv_d, rng),
            b1: vec![0.0; f],
            w2: Matrix::random_normal(d, f, FFN_GAIN / (f as f32).sqrt(), rng),
            b2: vec![0.0; d],
        }
    }

    fn params(&self) -> [&[f32]; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            self.wq.data(),
            &self.bq,
            self.wk.data(),
            &self.bk,
            self.wv.data(),
            &self.bv,
            self.wo.data(),
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            self.w1.data(),
            &self.b1,
            self.w2.data(),
            &self.b2,
        ]
    }

    fn params_mut(&mut self) -> [&mut [f32]; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            self.wq.data_mut(),
            &mut self.bq,
            self.wk.data_mut(),
            &mut self.bk,
            self.wv.data_mut(),
            &mut self.bv,
            self.wo.data_mut(),
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    fn normed(h: &Matrix, gain: &[f32], bias: &[f32]) -> Matrix {
        let mut out = Matrix::zeros(h.rows(), h.cols());
        for t in 0..h.rows() {
            layer_norm_into(h.row(t), gain, bias, LAYER_NORM_EPS, out.row_mut(t));
        }
        out
    }

    /// Row-stochastic attention matrix of one head.
    fn attention_probs(q: &Matrix, k: &Matrix, head: usize, head_dim: usize) -> Vec<Vec<f64>> {
        let t_len = q.rows();
        let lo = head * head_dim;
        let hi = lo + head_dim;
        let scale = 1.0 / (head_dim as f64).sqrt();
        (0..t_len)
            .map(|i| {
                let qi = &q.row(i)[lo..hi];
                let scores: Vec<f64> = (0..t_len)
                    .map(|j| dot(qi, &k.row(j)[lo..hi]) * scale)
                    .collect();
                crate::numeric::softmax_unchecked(&scores)
            })
            .collect()
    }

    fn forward(&self, h: &Matrix, num_heads: usize) -> Matrix {
        let t_len = h.rows();
        let d = h.cols();
        let head_dim = d / num_heads;

        let a = Self::normed(h, &self.ln1_gain, &self.ln1_bias);
        let q = a.affine(&self.wq, &self.bq);
        let k = a.affine(&self.wk, &self.bk);
        let v = a.affine(&self.wv, &self.bv);

        let mut mixed = Matrix::zeros(t_len, d);
        for head in 0..num_heads {
            let lo = head * head_dim;
            let probs = Self::attention_probs(&q, &k, head, head_dim);
            for (i, row) in probs.iter().enumerate() {
                let mut acc = vec![0.0f64; head_dim];
                for (j, &p) in row.iter().enumerate() {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += p * v.get(j, lo + c) as f64;
                    }
                }
                for (c, a) in acc.into_iter().enumerate() {
                    mixed.set(i, lo + c, a as f32);
                }
            }
        }
        let mut out = h.clone();
        out.add_assign(&mixed.affine(&self.wo, &self.bo));

        let b = Self::normed(&out, &self.ln2_gain, &self.ln2_bias);
        let mut hidden = b.affine(&self.w1, &self.b1);
        for x in hidden.data_mut() {
            *x = gelu(*x);
        }
        out.add_assign(&hidden.affine(&self.w2, &self.b2));
        out
    }
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn sinusoidal_table(max_frames: usize, dim: usize) -> Matrix {
    let mut table = Matrix::zeros(max_frames, dim);
    for t in 0..max_frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = t as f64 * rate;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            table.set(t, i, v as f32);
        }
    }
    table
}

/// Per-layer hidden states of one sequence. `layer(k)` is `h^k`, 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    layers: Vec<Matrix>,
    total_layers: usize,
}

impl HiddenStates {
    pub fn new(layers: Vec<Matrix>, total_layers: usize) -> Result<Self> {
        if layers.is_empty() || layers.len() > total_layers {
            return Err(Error::invalid(format!(
                "{} layers stored for a {total_layers}-layer encoder",
                layers.len()
            )));
        }
        let (t, d) = layers[0].shape();
        if layers.iter().any(|m| m.shape() != (t, d)) {
            return Err(Error::invalid("layers disagree on frame count or width"));
        }
        Ok(Self {
            layers,
            total_layers,
        })
    }

    pub fn layers_computed(&self) -> usize {
        self.layers.len()
    }

    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn is_complete(&self) -> bool {
        self.layers.len() == self.total_layers
    }

    pub fn frames(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn layer(&self, k: usize) -> Result<&Matrix> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::invalid(format!(
                "layer {k} not computed ({} of {} available)",
                self.layers.len(),
                self.total_layers
            )));
        }
        Ok(&self.layers[k - 1])
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    /// Copy of the first `k` layers, as `forward_until` would have produced.
    pub fn prefix(&self, k: usize) -> Result<HiddenStates> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::invalid(format!("prefix {k} out of range")));
        }
        Ok(Self {
            layers: self.layers[..k].to_vec(),
            total_layers: self.total_layers,
        })
    }
}

#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    input_weight: Matrix,
    input_bias: Vec<f32>,
    blocks: Vec<Block>,
    positions: Matrix,
    blocks_executed: AtomicU64,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            input_weight: self.input_weight.clone(),
            input_bias: self.input_bias.clone(),
            blocks: self.blocks.clone(),
            positions: self.positions.clone(),
            blocks_executed: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input_weight == other.input_weight
            && self.input_bias == other.input_bias
            && self.blocks == other.blocks
    }
}

impl Encoder {
    /// Deterministic initialization from `cfg.seed`.
    pub fn init(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let input_weight = Matrix::random_normal(
            cfg.model_dim,
            cfg.input_dim,
            1.0 / (cfg.input_dim as f32).sqrt(),
            &mut rng,
        );
        let blocks = (0..cfg.num_layers)
            .map(|_| Block::init(&cfg, &mut rng))
            .collect();
        Ok(Self::assemble(
            cfg,
            input_weight,
            vec![0.0; cfg.model_dim],
            blocks,
        ))
    }

    fn assemble(
        config: EncoderConfig,
        input_weight: Matrix,
        input_bias: Vec<f32>,
        blocks: Vec<Block>,
    ) -> Self {
        Self {
            positions: sinusoidal_table(config.max_frames, config.model_dim),
            config,
            input_weight,
            input_bias,
            blocks,
            blocks_executed: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Flat parameter arrays in checkpoint order: input projection weight,
    /// input projection bias, then per block `ln1 gain, ln1 bias, wq, bq, wk,
    /// bk, wv, bv, wo, bo, ln2 gain, ln2 bias, w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.input_weight.data(), &self.input_bias];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.input_weight.data_mut(), &mut self.input_bias];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }

    /// Zero-filled encoder of the right shape, to be populated from a checkpoint.
    pub(crate) fn empty(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Self::init(cfg)?;
        for p in enc.params_mut() {
            p.fill(0.0);
        }
        Ok(enc)
    }

    pub fn param_hash(&self) -> u64 {
        hash_f32s(self.params())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Total transformer blocks executed by this encoder since creation or
    /// the last reset.
    pub fn blocks_executed(&self) -> u64 {
        self.blocks_executed.load(Ordering::Relaxed)
    }

    pub fn reset_block_counter(&self) {
        self.blocks_executed.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        let t = input.rows();
        if t == 0 {
            return Err(Error::invalid("input has no frames"));
        }
        if t > self.config.max_frames {
            return Err(Error::invalid(format!(
                "input has {t} frames, max_frames is {}",
                self.config.max_frames
            )));
        }
        if input.cols() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "input width {} does not match input_dim {}",
                input.cols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn embed(&self, input: &Matrix) -> Matrix {
        let mut h = input.affine(&self.input_weight, &self.input_bias);
        for t in 0..h.rows() {
            for (x, p) in h.row_mut(t).iter_mut().zip(self.positions.row(t)) {
                *x += p;
            }
        }
        h
    }

    pub fn forward_all(&self, input: &Matrix) -> Result<HiddenStates> {
        self.forward_until(input, |_, _| ControlFlow::Continue(()))
    }

    /// Runs blocks in order, calling `stop(k, h^k)` after block `k`. Halts at
    /// the first `Break`; blocks after that are never executed.
    pub fn forward_until<F>(&self, input: &Matrix, mut stop: F) -> Result<HiddenStates>
    where
        F: FnMut(usize, &Matrix) -> ControlFlow<()>,
    {
        self.check_input(input)?;
        let mut h = self.embed(input);
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, self.config.num_heads);
            self.blocks_executed.fetch_add(1, Ordering::Relaxed);
            let halt = stop(i + 1, &h).is_break();
            layers.push(h.clone());
            if halt {
                break;
            }
        }
        HiddenStates::new(layers, self.config.num_layers)
    }

    pub fn forward_batch(&self, inputs: &[Matrix]) -> Result<Vec<HiddenStates>> {
        inputs.iter().map(|x| self.forward_all(x)).collect()
    }

    /// Attention probabilities of `head` in block `layer` (1-based) for the
    /// given input.
    pub fn attention_map(&self, input: &Matrix, layer: usize, head: usize) -> Result<Vec<Vec<f64>>> {
        if layer == 0 || layer > self.config.num_layers || head >= self.config.num_heads {
            return Err(Error::invalid(format!("no head {head} in layer {layer}")));
        }
        self.check_input(input)?;
        let mut h = self.embed(input);
        for block in &self.blocks[..layer - 1] {
            h = block.forward(&h, self.config.num_heads);
        }
        let block = &self.blocks[layer - 1];
        let a = Block::normed(&h, &block.ln1_gain, &block.ln1_bias);
        let q = a.affine(&block.wq, &block.bq);
        let k = a.affine(&block.wk, &block.bk);
        Ok(Block::attention_probs(&q, &k, head, self.config.head_dim()))
    }
}
