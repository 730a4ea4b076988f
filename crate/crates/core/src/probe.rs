//! Downstream classifier over early-exited features.
//!
//! Each sample's exited prefix `h^1..h^k` is layer-normalized per frame,
//! mixed with softmax-normalized layer weights, and fed to a linear probe.
//! Early exit is active during training: the prefix length of every
//! training sample comes from the exit policy.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::branches::BranchSet;
use crate::encoder::{Encoder, HiddenStates};
use crate::error::{Error, Result};
use crate::linear::{argmax, BatchSampler, LinearHead, TrainSettings};
use crate::numeric::{
    cross_entropy_unchecked, hash_f32s, layer_norm_into, softmax_unchecked, Matrix, OptimState,
    SeededRng, LAYER_NORM_EPS,
};
use crate::policy::{collect_span_stats, ExitPolicy, ExitTrace, SpanStats};

const PROBE_INIT_STD: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// One label per frame.
    Frame,
    /// One label per sequence, from mean-pooled features.
    Utterance,
}

/// How raw layer weights become mixing coefficients for a prefix of length k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// softmax over the first k raw weights.
    Prefix,
    /// softmax over all L raw weights, truncated to the first k.
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleLabels {
    pub frames: Vec<u32>,
    pub utterance: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamHead {
    pub(crate) layer_weights: Vec<f32>,
    pub(crate) probe: LinearHead,
    pub(crate) task: Task,
    pub(crate) weight_mode: WeightMode,
}

/// Layer-normalized copies of the exited layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPrefix {
    layers: Vec<Matrix>,
}

impl NormalizedPrefix {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn frames(&self) -> usize {
        self.layers.first().map_or(0, Matrix::rows)
    }
}

/// Unit-gain, zero-bias layer norm of every frame of layers `1..=k`.
pub fn normalize_prefix(hs: &HiddenStates, k: usize) -> Result<NormalizedPrefix> {
    if k == 0 || k > hs.layers_computed() {
        return Err(Error::invalid(format!(
            "prefix length {k} exceeds {} computed layers",
            hs.layers_computed()
        )));
    }
    let d = hs.dim();
    let gain = vec![1.0f32; d];
    let bias = vec![0.0f32; d];
    let layers = hs.layers()[..k]
        .iter()
        .map(|m| {
            let mut out = Matrix::zeros(m.rows(), d);
            for t in 0..m.rows() {
                layer_norm_into(m.row(t), &gain, &bias, LAYER_NORM_EPS, out.row_mut(t));
            }
            out
        })
        .collect();
    Ok(NormalizedPrefix { layers })
}

#[derive(Debug, Clone)]
pub struct DownstreamGrads {
    pub layer_weights: Vec<f64>,
    pub probe_weight: Vec<f64>,
    pub probe_bias: Vec<f64>,
}

impl DownstreamGrads {
    fn zeros(head: &DownstreamHead) -> Self {
        Self {
            layer_weights: vec![0.0; head.layer_weights.len()],
            probe_weight: vec![0.0; head.probe.weight.data().len()],
            probe_bias: vec![0.0; head.probe.bias.len()],
        }
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.layer_weights.iter_mut().zip(&other.layer_weights) {
            *a += b * scale;
        }
        for (a, b) in self.probe_weight.iter_mut().zip(&other.probe_weight) {
            *a += b * scale;
        }
        for (a, b) in self.probe_bias.iter_mut().zip(&other.probe_bias) {
            *a += b * scale;
        }
    }
}

impl DownstreamHead {
    /// Uniform layer weights and a small random probe.
    pub fn init(layers: usize, labels: usize, dim: usize, task: Task, weight_mode: WeightMode, seed: u64) -> Result<Self> {
        if layers == 0 || labels < 2 || dim == 0 {
            return Err(Error::invalid("downstream head needs layers, >= 2 labels and a width"));
        }
        let mut rng = SeededRng::new(seed);
        Ok(Self {
            layer_weights: vec![0.0; layers],
            probe: LinearHead::random(labels, dim, PROBE_INIT_STD, &mut rng),
            task,
            weight_mode,
        })
    }

    pub fn from_parts(layer_weights: Vec<f32>, probe_weight: Matrix, probe_bias: Vec<f32>, task: Task, weight_mode: WeightMode) -> Result<Self> {
        if layer_weights.is_empty() || probe_bias.len() != probe_weight.rows() {
            return Err(Error::invalid("downstream head parts disagree on shape"));
        }
        let head = Self {
            layer_weights,
            probe: LinearHead {
                weight: probe_weight,
                bias: probe_bias,
            },
            task,
            weight_mode,
        };
        if !head.probe.is_finite() || head.layer_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("downstream parameters must be finite"));
        }
        Ok(head)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn weight_mode(&self) -> WeightMode {
        self.weight_mode
    }

    pub fn layer_weights(&self) -> &[f32] {
        &self.layer_weights
    }

    pub fn layer_weights_mut(&mut self) -> &mut [f32] {
        &mut self.layer_weights
    }

    pub fn probe(&self) -> &LinearHead {
        &self.probe
    }

    pub fn probe_mut(&mut self) -> &mut LinearHead {
        &mut self.probe
    }

    pub fn num_labels(&self) -> usize {
        self.probe.classes()
    }

    pub fn param_hash(&self) -> u64 {
        hash_f32s([
            self.layer_weights.as_slice(),
            self.probe.weight.data(),
            self.probe.bias.as_slice(),
        ])
    }

    /// Support of the mixing softmax for a prefix of length `k`.
    fn support(&self, k: usize) -> usize {
        match self.weight_mode {
            WeightMode::Prefix => k,
            WeightMode::Global => self.layer_weights.len(),
        }
    }

    /// Mixing coefficients for layers `1..=k`.
    pub fn mix_weights(&self, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = self.layer_weights[..self.support(k)]
            .iter()
            .map(|&w| w as f64)
            .collect();
        let mut s = softmax_unchecked(&raw);
        s.truncate(k);
        s
    }

    fn features_f64(&self, prefix: &NormalizedPrefix) -> Vec<Vec<f64>> {
        let s = self.mix_weights(prefix.len());
        let t_len = prefix.frames();
        let d = prefix.layers[0].cols();
        (0..t_len)
            .map(|t| {
                let mut f = vec![0.0f64; d];
                for (w, layer) in s.iter().zip(&prefix.layers) {
                    for (fi, &x) in f.iter_mut().zip(layer.row(t)) {
                        *fi += w * x as f64;
                    }
                }
                f
            })
            .collect()
    }

    /// `Σ_k w_k h̄^k` over the prefix, one row per frame.
    pub fn weighted_features(&self, prefix: &NormalizedPrefix) -> Result<Matrix> {
        self.check_prefix(prefix)?;
        let rows = self.features_f64(prefix);
        let d = prefix.layers[0].cols();
        let data = rows.into_iter().flatten().map(|v| v as f32).collect();
        Matrix::from_vec(prefix.frames(), d, data)
    }

    fn check_prefix(&self, prefix: &NormalizedPrefix) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::invalid("empty prefix"));
        }
        if prefix.len() > self.layer_weights.len() {
            return Err(Error::invalid("prefix longer than the head's layer weights"));
        }
        if prefix.layers[0].cols() != self.probe.dim() {
            return Err(Error::invalid("prefix width differs from probe width"));
        }
        Ok(())
    }

    fn logits_f64(&self, f: &[f64]) -> Vec<f64> {
        (0..self.probe.classes())
            .map(|c| {
                self.probe.bias[c] as f64
                    + self
                        .probe
                        .weight
                        .row(c)
                        .iter()
                        .zip(f)
                        .map(|(&w, &x)| w as f64 * x)
                        .sum::<f64>()
            })
            .collect()
    }

    fn pooled(features: &[Vec<f64>]) -> Vec<f64> {
        let n = features.len() as f64;
        let mut out = vec![0.0; features[0].len()];
        for f in features {
            for (o, x) in out.iter_mut().zip(f) {
                *o += x / n;
            }
        }
        out
    }

    /// Predicted labels: one per frame, or a single utterance label.
    pub fn predict(&self, prefix: &NormalizedPrefix) -> Result<Vec<u32>> {
        self.check_prefix(prefix)?;
        let feats = self.features_f64(prefix);
        Ok(match self.task {
            Task::Frame => feats
                .iter()
                .map(|f| argmax(&self.logits_f64(f)) as u32)
                .collect(),
            Task::Utterance => vec![argmax(&self.logits_f64(&Self::pooled(&feats))) as u32],
        })
    }

    /// (correct, total) for one sample.
    pub fn score(&self, prefix: &NormalizedPrefix, labels: &SampleLabels) -> Result<(usize, usize)> {
        let pred = self.predict(prefix)?;
        Ok(match self.task {
            Task::Frame => (
                pred.iter().zip(&labels.frames).filter(|(p, y)| p == y).count(),
                pred.len(),
            ),
            Task::Utterance => ((pred[0] == labels.utterance) as usize, 1),
        })
    }

    /// Loss of one sample and its gradient w.r.t. raw layer weights, probe
    /// weight and probe bias.
    pub fn loss_and_grads(&self, prefix: &NormalizedPrefix, labels: &SampleLabels) -> Result<(f64, DownstreamGrads)> {
        self.check_prefix(prefix)?;
        let k = prefix.len();
        let t_len = prefix.frames();
        let d = self.probe.dim();
        let c = self.probe.classes();
        let feats = self.features_f64(prefix);
        let mut grads = DownstreamGrads::zeros(self);

        // (dL/dfeature per frame, loss)
        let mut dfeat = vec![vec![0.0f64; d]; t_len];
        let mut loss = 0.0;
        let backprop_logits = |f: &[f64], y: usize, scale: f64, grads: &mut DownstreamGrads| -> (f64, Vec<f64>) {
            let z = self.logits_f64(f);
            let l = cross_entropy_unchecked(&z, y);
            let mut dz = softmax_unchecked(&z);
            dz[y] -= 1.0;
            let mut df = vec![0.0f64; d];
            for (cls, g) in dz.iter().enumerate() {
                let g = g * scale;
                grads.probe_bias[cls] += g;
                let w = self.probe.weight.row(cls);
                let gw = &mut grads.probe_weight[cls * d..(cls + 1) * d];
                for i in 0..d {
                    gw[i] += g * f[i];
                    df[i] += g * w[i] as f64;
                }
            }
            (l * scale, df)
        };
        match self.task {
            Task::Frame => {
                for y in &labels.frames {
                    if *y as usize >= c {
                        return Err(Error::invalid(format!("label {y} out of range")));
                    }
                }
                if labels.frames.len() != t_len {
                    return Err(Error::invalid("frame label count differs from frame count"));
                }
                let scale = 1.0 / t_len as f64;
                for t in 0..t_len {
                    let (l, df) = backprop_logits(&feats[t], labels.frames[t] as usize, scale, &mut grads);
                    loss += l;
                    dfeat[t] = df;
                }
            }
            Task::Utterance => {
                if labels.utterance as usize >= c {
                    return Err(Error::invalid(format!("label {} out of range", labels.utterance)));
                }
                let pooled = Self::pooled(&feats);
                let (l, df) = backprop_logits(&pooled, labels.utterance as usize, 1.0, &mut grads);
                loss = l;
                for row in &mut dfeat {
                    for (r, g) in row.iter_mut().zip(&df) {
                        *r = g / t_len as f64;
                    }
                }
            }
        }

        // dL/ds_j = Σ_t dfeat_t · h̄^j_t, then back through the softmax.
        let n = self.support(k);
        let raw: Vec<f64> = self.layer_weights[..n].iter().map(|&w| w as f64).collect();
        let s = softmax_unchecked(&raw);
        let mut ds = vec![0.0f64; n];
        for (j, layer) in prefix.layers.iter().enumerate() {
            ds[j] = (0..t_len)
                .map(|t| {
                    dfeat[t]
                        .iter()
                        .zip(layer.row(t))
                        .map(|(g, &h)| g * h as f64)
                        .sum::<f64>()
                })
                .sum();
        }
        let inner: f64 = s.iter().zip(&ds).map(|(a, b)| a * b).sum();
        for i in 0..n {
            grads.layer_weights[i] = s[i] * (ds[i] - inner);
        }
        Ok((loss, grads))
    }

    fn apply(&mut self, opt: &mut DownstreamOptimizer, grads: &DownstreamGrads, lr: f64) {
        opt.layers.step(&mut self.layer_weights, &grads.layer_weights, lr);
        opt.weight.step(self.probe.weight.data_mut(), &grads.probe_weight, lr);
        opt.bias.step(&mut self.probe.bias, &grads.probe_bias, lr);
    }
}

struct DownstreamOptimizer {
    layers: OptimState,
    weight: OptimState,
    bias: OptimState,
}

#[derive(Debug, Clone)]
pub struct DownstreamFit {
    pub head: DownstreamHead,
    pub stats: SpanStats,
    pub traces: Vec<ExitTrace>,
    pub losses: Vec<f64>,
}

/// Trains the probe with early exit active: each sample is exited by
/// `policy` once (all upstream parts are frozen), then minibatch descent runs
/// over the resulting prefixes.
pub fn train_downstream(
    enc: &Encoder,
    branches: &BranchSet,
    policy: &ExitPolicy,
    init: DownstreamHead,
    inputs: &[Matrix],
    labels: &[SampleLabels],
    settings: &TrainSettings,
) -> Result<DownstreamFit> {
    if inputs.is_empty() {
        return Err(Error::invalid("downstream training set is empty"));
    }
    let mut prefixes = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let (hs, trace) = policy.run(enc, branches, x, i)?;
        prefixes.push(normalize_prefix(&hs, trace.exit_layer)?);
        traces.push(trace);
    }
    fit_prefixes(init, prefixes, traces, labels, settings, policy.layers())
}

/// Same as [`train_downstream`] over precomputed full-depth states.
pub fn train_downstream_on_states(
    states: &[HiddenStates],
    branches: &BranchSet,
    policy: &ExitPolicy,
    init: DownstreamHead,
    labels: &[SampleLabels],
    settings: &TrainSettings,
) -> Result<DownstreamFit> {
    if states.is_empty() {
        return Err(Error::invalid("downstream training set is empty"));
    }
    let mut prefixes = Vec::with_capacity(states.len());
    let mut traces = Vec::with_capacity(states.len());
    for (i, hs) in states.iter().enumerate() {
        let trace = policy.trace_from_states(branches, hs, i)?;
        prefixes.push(normalize_prefix(hs, trace.exit_layer)?);
        traces.push(trace);
    }
    fit_prefixes(init, prefixes, traces, labels, settings, policy.layers())
}

fn fit_prefixes(
    mut head: DownstreamHead,
    prefixes: Vec<NormalizedPrefix>,
    traces: Vec<ExitTrace>,
    labels: &[SampleLabels],
    settings: &TrainSettings,
    layers: usize,
) -> Result<DownstreamFit> {
    settings.validate()?;
    if labels.len() != prefixes.len() {
        return Err(Error::invalid("label count differs from sample count"));
    }
    let stats = collect_span_stats(&traces, layers)?;
    let mut opt = DownstreamOptimizer {
        layers: OptimState::new(settings.optimizer, head.layer_weights.len()),
        weight: OptimState::new(settings.optimizer, head.probe.weight.data().len()),
        bias: OptimState::new(settings.optimizer, head.probe.bias.len()),
    };
    let mut sampler = BatchSampler::new(prefixes.len(), settings.batch, settings.seed);
    let mut losses = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let idx = sampler.next_batch();
        let mut total = DownstreamGrads::zeros(&head);
        let mut loss = 0.0;
        let scale = 1.0 / idx.len() as f64;
        for &i in &idx {
            let (l, g) = head.loss_and_grads(&prefixes[i], &labels[i])?;
            loss += l * scale;
            total.add_scaled(&g, scale);
        }
        head.apply(&mut opt, &total, settings.lr);
        losses.push(loss);
    }
    Ok(DownstreamFit {
        head,
        stats,
        traces,
        losses,
    })
}

/// Per-sample evaluation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub exit_layer: usize,
    pub correct: usize,
    pub total: usize,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub scored: usize,
    pub mean_exit_layer: f64,
    pub min_exit_layer: usize,
    pub max_exit_layer: usize,
    /// `exit_histogram[k - 1]` samples exited at layer `k`.
    pub exit_histogram: Vec<usize>,
    pub exit_fractions: Vec<f64>,
    pub forced_fraction: f64,
    /// `1 - Σ k̂ / (N·L)`.
    pub layer_compute_saved: f64,
}

impl EvalMetrics {
    pub fn from_outcomes(outcomes: &[SampleOutcome], layers: usize) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::invalid("no samples evaluated"));
        }
        let n = outcomes.len();
        let mut hist = vec![0usize; layers];
        for o in outcomes {
            if o.exit_layer == 0 || o.exit_layer > layers {
                return Err(Error::invalid(format!("exit layer {} out of range", o.exit_layer)));
            }
            hist[o.exit_layer - 1] += 1;
        }
        let layer_sum: usize = outcomes.iter().map(|o| o.exit_layer).sum();
        let correct: usize = outcomes.iter().map(|o| o.correct).sum();
        let scored: usize = outcomes.iter().map(|o| o.total).sum();
        Ok(Self {
            samples: n,
            accuracy: correct as f64 / scored.max(1) as f64,
            correct,
            scored,
            mean_exit_layer: layer_sum as f64 / n as f64,
            min_exit_layer: outcomes.iter().map(|o| o.exit_layer).min().unwrap_or(0),
            max_exit_layer: outcomes.iter().map(|o| o.exit_layer).max().unwrap_or(0),
            exit_fractions: hist.iter().map(|&c| c as f64 / n as f64).collect(),
            exit_histogram: hist,
            forced_fraction: outcomes.iter().filter(|o| o.forced).count() as f64 / n as f64,
            layer_compute_saved: layer_compute_saved(outcomes.iter().map(|o| o.exit_layer), layers),
        })
    }
}

/// `1 - Σ k̂ / (N·L)`.
pub fn layer_compute_saved(exits: impl IntoIterator<Item = usize>, layers: usize) -> f64 {
    let (sum, n) = exits.into_iter().fold((0usize, 0usize), |(s, n), k| (s + k, n + 1));
    1.0 - sum as f64 / (n * layers) as f64
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub outcomes: Vec<SampleOutcome>,
    pub traces: Vec<ExitTrace>,
}

fn finish(outcomes: Vec<SampleOutcome>, traces: Vec<ExitTrace>, layers: usize) -> Result<Evaluation> {
    Ok(Evaluation {
        metrics: EvalMetrics::from_outcomes(&outcomes, layers)?,
        outcomes,
        traces,
    })
}

fn check_eval_inputs(n_inputs: usize, labels: &[SampleLabels]) -> Result<()> {
    if n_inputs == 0 {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if labels.len() != n_inputs {
        return Err(Error::invalid("label count differs from sample count"));
    }
    Ok(())
}

/// Dynamic early-exit evaluation with a real, lazily stopped forward pass.
pub fn evaluate(
    enc: &Encoder,
    branches: &BranchSet,
    policy: &ExitPolicy,
    head: &DownstreamHead,
    inputs: &[Matrix],
    labels: &[SampleLabels],
) -> Result<Evaluation> {
    check_eval_inputs(inputs.len(), labels)?;
    let mut outcomes = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for (i, (x, y)) in inputs.iter().zip(labels).enumerate() {
        let (hs, trace) = policy.run(enc, branches, x, i)?;
        let (correct, total) = head.score(&normalize_prefix(&hs, trace.exit_layer)?, y)?;
        outcomes.push(SampleOutcome {
            exit_layer: trace.exit_layer,
            correct,
            total,
            forced: trace.forced,
        });
        traces.push(trace);
    }
    finish(outcomes, traces, policy.layers())
}

/// Dynamic evaluation on precomputed full-depth states.
pub fn evaluate_on_states(
    states: &[HiddenStates],
    branches: &BranchSet,
    policy: &ExitPolicy,
    head: &DownstreamHead,
    labels: &[SampleLabels],
) -> Result<Evaluation> {
    check_eval_inputs(states.len(), labels)?;
    let mut outcomes = Vec::with_capacity(states.len());
    let mut traces = Vec::with_capacity(states.len());
    for (i, (hs, y)) in states.iter().zip(labels).enumerate() {
        let trace = policy.trace_from_states(branches, hs, i)?;
        let (correct, total) = head.score(&normalize_prefix(hs, trace.exit_layer)?, y)?;
        outcomes.push(SampleOutcome {
            exit_layer: trace.exit_layer,
            correct,
            total,
            forced: trace.forced,
        });
        traces.push(trace);
    }
    finish(outcomes, traces, policy.layers())
}

/// Static baseline: the encoder truncated to its first `k` layers, no
/// branches involved.
pub fn evaluate_static(
    enc: &Encoder,
    head: &DownstreamHead,
    inputs: &[Matrix],
    labels: &[SampleLabels],
    k: usize,
) -> Result<EvalMetrics> {
    check_eval_inputs(inputs.len(), labels)?;
    check_static_layer(k, enc.num_layers())?;
    let mut outcomes = Vec::with_capacity(inputs.len());
    for (x, y) in inputs.iter().zip(labels) {
        let hs = enc.forward_until(x, |layer, _| {
            if layer == k {
                std::ops::ControlFlow::Break(())
            } else {
                std::ops::ControlFlow::Continue(())
            }
        })?;
        let (correct, total) = head.score(&normalize_prefix(&hs, k)?, y)?;
        outcomes.push(SampleOutcome {
            exit_layer: k,
            correct,
            total,
            forced: false,
        });
    }
    EvalMetrics::from_outcomes(&outcomes, enc.num_layers())
}

pub fn evaluate_static_on_states(
    states: &[HiddenStates],
    head: &DownstreamHead,
    labels: &[SampleLabels],
    k: usize,
) -> Result<Vec<SampleOutcome>> {
    check_eval_inputs(states.len(), labels)?;
    check_static_layer(k, states[0].total_layers())?;
    states
        .iter()
        .zip(labels)
        .map(|(hs, y)| {
            let (correct, total) = head.score(&normalize_prefix(hs, k)?, y)?;
            Ok(SampleOutcome {
                exit_layer: k,
                correct,
                total,
                forced: false,
            })
        })
        .collect()
}

fn check_static_layer(k: usize, layers: usize) -> Result<()> {
    if k == 0 || k > layers {
        return Err(Error::invalid(format!("static layer {k} outside 1..={layers}")));
    }
    Ok(())
}

/// Wall-clock forward time with exits versus full depth, measured in the
/// same process. Not deterministic; reported separately from metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTiming {
    pub full_depth_seconds: f64,
    pub early_exit_seconds: f64,
    pub forward_time_saved: f64,
}

pub fn measure_forward_time(
    enc: &Encoder,
    branches: &BranchSet,
    policy: &ExitPolicy,
    inputs: &[Matrix],
) -> Result<ForwardTiming> {
    if inputs.is_empty() {
        return Err(Error::invalid("timing set is empty"));
    }
    let start = Instant::now();
    for x in inputs {
        std::hint::black_box(enc.forward_all(x)?);
    }
    let full = start.elapsed().as_secs_f64();
    let start = Instant::now();
    for (i, x) in inputs.iter().enumerate() {
        std::hint::black_box(policy.run(enc, branches, x, i)?);
    }
    let exit = start.elapsed().as_secs_f64();
    Ok(ForwardTiming {
        full_depth_seconds: full,
        early_exit_seconds: exit,
        forward_time_saved: if full > 0.0 { 1.0 - exit / full } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hs_from(layers: Vec<Vec<f32>>, t: usize, d: usize) -> HiddenStates {
        let total = layers.len();
        HiddenStates::new(
            layers
                .into_iter()
                .map(|v| Matrix::from_vec(t, d, v).unwrap())
                .collect(),
            total,
        )
        .unwrap()
    }

    #[test]
    fn normalize_prefix_examples() {
        let hs = hs_from(vec![vec![2.0; 6], vec![1.0, 2.0, 3.0, 4.0, 6.0, 8.0]], 2, 3);
        let p = normalize_prefix(&hs, 2).unwrap();
        assert!(p.layers()[0].data().iter().all(|v| *v == 0.0));
        // mean/variance oracle per frame vector
        for t in 0..2 {
            let row: Vec<f64> = hs.layers()[1].row(t).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / 3.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            for (i, v) in row.iter().enumerate() {
                let want = (v - mean) / (var + 1e-5).sqrt();
                assert!((p.layers()[1].get(t, i) as f64 - want).abs() < 1e-5);
            }
        }
        assert_eq!(normalize_prefix(&hs, 1).unwrap().len(), 1);
        assert!(matches!(normalize_prefix(&hs, 3), Err(Error::InvalidArgument(_))));
        assert!(normalize_prefix(&hs, 0).is_err());
    }

    fn prefix2() -> NormalizedPrefix {
        let hs = hs_from(
            vec![vec![1.0, -2.0, 0.5, 3.0], vec![-1.0, 0.0, 2.0, 1.0]],
            2,
            2,
        );
        normalize_prefix(&hs, 2).unwrap()
    }

    #[test]
    fn weighted_features_examples() {
        let mut head = DownstreamHead::init(4, 3, 2, Task::Frame, WeightMode::Prefix, 0).unwrap();
        let p = prefix2();
        let one = NormalizedPrefix {
            layers: vec![p.layers()[0].clone()],
        };
        assert_eq!(head.weighted_features(&one).unwrap(), p.layers()[0]);

        let f = head.weighted_features(&p).unwrap();
        for (i, v) in f.data().iter().enumerate() {
            let want = 0.5 * p.layers()[0].data()[i] as f64 + 0.5 * p.layers()[1].data()[i] as f64;
            assert!((*v as f64 - want).abs() < 1e-6);
        }

        head.layer_weights[0] = 0.0;
        head.layer_weights[1] = 3f32.ln();
        let f = head.weighted_features(&p).unwrap();
        for (i, v) in f.data().iter().enumerate() {
            let want = 0.25 * p.layers()[0].data()[i] as f64 + 0.75 * p.layers()[1].data()[i] as f64;
            assert!((*v as f64 - want).abs() < 1e-6);
        }
        assert!(head.weighted_features(&NormalizedPrefix { layers: vec![] }).is_err());
    }

    #[test]
    fn mix_weights_sum_to_one_in_prefix_mode() {
        let mut head = DownstreamHead::init(6, 3, 2, Task::Frame, WeightMode::Prefix, 0).unwrap();
        head.layer_weights = vec![0.3, -1.0, 2.0, 0.0, 5.0, -3.0];
        for k in 1..=6 {
            let s: f64 = head.mix_weights(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        head.weight_mode = WeightMode::Global;
        let s: f64 = head.mix_weights(2).iter().sum();
        assert!(s < 1.0);
    }

    #[test]
    fn compute_saved_examples() {
        assert_eq!(layer_compute_saved([8, 8, 8], 8), 0.0);
        assert_eq!(layer_compute_saved([4; 10], 8), 0.5);
        assert_eq!(layer_compute_saved([2, 4, 6, 8], 8), 1.0 - 20.0 / 32.0);
        assert_eq!(layer_compute_saved([2, 4, 6, 8], 8), 0.375);
    }

    #[test]
    fn utterance_task_predicts_one_label() {
        let head = DownstreamHead::init(2, 3, 2, Task::Utterance, WeightMode::Prefix, 1).unwrap();
        let p = prefix2();
        assert_eq!(head.predict(&p).unwrap().len(), 1);
        let labels = SampleLabels {
            frames: vec![0, 1],
            utterance: 2,
        };
        let (l, g) = head.loss_and_grads(&p, &labels).unwrap();
        assert!(l > 0.0);
        assert!(g.probe_bias.iter().sum::<f64>().abs() < 1e-9);
    }
}
