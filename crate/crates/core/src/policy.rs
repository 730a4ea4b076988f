//! Entropy-threshold exit decisions.
//!
//! A policy holds the threshold `tau`, the ratio `rho` it was calibrated
//! with, and an exit span restricting which layers may fire. Layers are
//! scanned in increasing order; the first allowed layer whose branch entropy
//! is below `tau` wins. When none fires, the exit is forced at the deepest
//! allowed layer. Layers before the first allowed one are still computed,
//! but their branches are never evaluated.

use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branches::{BranchSet, EntropyProfile};
use crate::encoder::{Encoder, HiddenStates};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const DEFAULT_THRESHOLD_CUTOFF: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpanKind {
    Unconstrained,
    Mean,
    Threshold,
    MinMax,
}

impl SpanKind {
    pub const ALL: [SpanKind; 4] = [
        SpanKind::Unconstrained,
        SpanKind::Mean,
        SpanKind::Threshold,
        SpanKind::MinMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpanKind::Unconstrained => "unconstrained",
            SpanKind::Mean => "mean",
            SpanKind::Threshold => "threshold",
            SpanKind::MinMax => "min-max",
        }
    }
}

impl fmt::Display for SpanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconstrained" | "none" => Ok(SpanKind::Unconstrained),
            "mean" => Ok(SpanKind::Mean),
            "threshold" => Ok(SpanKind::Threshold),
            "min-max" | "minmax" => Ok(SpanKind::MinMax),
            other => Err(Error::config(format!("unknown span `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Span {
    Unconstrained,
    /// Exit only at `floor(mu)..=ceil(mu)`.
    Mean { mu: f64 },
    /// Exit only where the training exit rate exceeds `cutoff`.
    Threshold { rates: Vec<f64>, cutoff: f64 },
    MinMax { k_min: usize, k_max: usize },
}

impl Span {
    pub fn kind(&self) -> SpanKind {
        match self {
            Span::Unconstrained => SpanKind::Unconstrained,
            Span::Mean { .. } => SpanKind::Mean,
            Span::Threshold { .. } => SpanKind::Threshold,
            Span::MinMax { .. } => SpanKind::MinMax,
        }
    }

    /// `allowed[k - 1]` for k in 1..=layers.
    fn allowed(&self, layers: usize) -> Result<Vec<bool>> {
        let allowed: Vec<bool> = match self {
            Span::Unconstrained => vec![true; layers],
            Span::Mean { mu } => {
                if !(1.0..=layers as f64).contains(mu) {
                    return Err(Error::config(format!("mean exit layer {mu} outside [1, {layers}]")));
                }
                let (lo, hi) = (mu.floor() as usize, mu.ceil() as usize);
                (1..=layers).map(|k| lo <= k && k <= hi).collect()
            }
            Span::Threshold { rates, cutoff } => {
                if !(*cutoff > 0.0 && *cutoff < 1.0) {
                    return Err(Error::config(format!("threshold cutoff {cutoff} outside (0, 1)")));
                }
                if rates.len() != layers {
                    return Err(Error::config(format!(
                        "{} exit rates for {layers} layers",
                        rates.len()
                    )));
                }
                rates.iter().map(|r| r > cutoff).collect()
            }
            Span::MinMax { k_min, k_max } => {
                if !(1 <= *k_min && k_min <= k_max && *k_max <= layers) {
                    return Err(Error::config(format!(
                        "min-max span [{k_min}, {k_max}] invalid for {layers} layers"
                    )));
                }
                (1..=layers).map(|k| *k_min <= k && k <= *k_max).collect()
            }
        };
        if !allowed.iter().any(|a| *a) {
            return Err(Error::config(format!("{} span allows no exit layer", self.kind())));
        }
        Ok(allowed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    tau: f64,
    rho: f64,
    layers: usize,
    span: Span,
    allowed: Vec<bool>,
    deepest: usize,
}

/// Outcome of scanning one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitDecision {
    pub exit_layer: usize,
    /// Entropy of each evaluated branch, `None` where the branch was skipped.
    pub entropies: Vec<Option<f64>>,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitTrace {
    pub sample_id: usize,
    pub exit_layer: usize,
    pub entropies: Vec<Option<f64>>,
    pub layers_computed: usize,
    pub forced: bool,
}

impl ExitPolicy {
    pub fn new(tau: f64, rho: f64, layers: usize, span: Span) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::config(format!("threshold {tau} must be finite and nonnegative")));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::config(format!("ratio {rho} outside [0, 1]")));
        }
        if layers == 0 {
            return Err(Error::config("policy needs at least one layer"));
        }
        let allowed = span.allowed(layers)?;
        let deepest = allowed.iter().rposition(|a| *a).map(|i| i + 1).unwrap_or(layers);
        Ok(Self {
            tau,
            rho,
            layers,
            span,
            allowed,
            deepest,
        })
    }

    /// Exits at layer `k` on every sample (forced, because `tau = 0`).
    pub fn fixed_layer(k: usize, layers: usize) -> Result<Self> {
        Self::new(0.0, 0.0, layers, Span::MinMax { k_min: k, k_max: k })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn span(&self) -> &Span {
        &self.span
    }

    pub fn is_allowed(&self, k: usize) -> bool {
        k >= 1 && k <= self.layers && self.allowed[k - 1]
    }

    pub fn allowed_layers(&self) -> Vec<usize> {
        (1..=self.layers).filter(|&k| self.allowed[k - 1]).collect()
    }

    pub fn deepest_allowed(&self) -> usize {
        self.deepest
    }

    /// Same span and layers with a threshold recalibrated at a new ratio.
    pub fn with_rho(&self, profile: &EntropyProfile, rho: f64) -> Result<Self> {
        let base = calibrate(profile, rho)?;
        Self::new(base.tau, rho, self.layers, self.span.clone())
    }

    /// Decision at layer `k` given a lazily computed entropy: `Some(forced)`
    /// when the sample exits here.
    fn check(&self, k: usize, entropy: impl FnOnce() -> f64) -> (Option<bool>, Option<f64>) {
        if !self.is_allowed(k) {
            return (None, None);
        }
        let e = entropy();
        if e < self.tau {
            (Some(false), Some(e))
        } else if k == self.deepest {
            (Some(true), Some(e))
        } else {
            (None, Some(e))
        }
    }

    /// Scans allowed layers with `entropy_at(k)`, which is only called for
    /// allowed layers up to the exit.
    pub fn decide_exit(&self, mut entropy_at: impl FnMut(usize) -> f64) -> ExitDecision {
        let mut entropies = vec![None; self.layers];
        for k in 1..=self.layers {
            let (exit, e) = self.check(k, || entropy_at(k));
            entropies[k - 1] = e;
            if let Some(forced) = exit {
                return ExitDecision {
                    exit_layer: k,
                    entropies,
                    forced,
                };
            }
        }
        unreachable!("deepest allowed layer always exits")
    }

    /// Lazy forward pass that stops at the exit layer.
    pub fn run(
        &self,
        enc: &Encoder,
        branches: &BranchSet,
        input: &Matrix,
        sample_id: usize,
    ) -> Result<(HiddenStates, ExitTrace)> {
        self.check_shapes(enc.num_layers(), branches)?;
        let mut entropies = vec![None; self.layers];
        let mut outcome = None;
        let mut failure = None;
        let hs = enc.forward_until(input, |k, h| {
            let (exit, e) = self.check(k, || match branches.entropy_of_frames(h, k) {
                Ok(e) => e,
                Err(err) => {
                    failure = Some(err);
                    f64::INFINITY
                }
            });
            entropies[k - 1] = e;
            match exit {
                Some(forced) => {
                    outcome = Some((k, forced));
                    ControlFlow::Break(())
                }
                None => ControlFlow::Continue(()),
            }
        })?;
        if let Some(err) = failure {
            return Err(err);
        }
        let (exit_layer, forced) = outcome.expect("deepest allowed layer always exits");
        let trace = ExitTrace {
            sample_id,
            exit_layer,
            entropies,
            layers_computed: hs.layers_computed(),
            forced,
        };
        Ok((hs, trace))
    }

    /// Decision on precomputed states; identical to [`ExitPolicy::run`] by
    /// the prefix property of the encoder.
    pub fn trace_from_states(&self, branches: &BranchSet, hs: &HiddenStates, sample_id: usize) -> Result<ExitTrace> {
        self.check_shapes(hs.total_layers(), branches)?;
        let mut failure = None;
        let d = self.decide_exit(|k| match branches.branch_entropy(hs, k) {
            Ok(e) => e,
            Err(err) => {
                failure = Some(err);
                f64::INFINITY
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        Ok(ExitTrace {
            sample_id,
            exit_layer: d.exit_layer,
            entropies: d.entropies,
            layers_computed: d.exit_layer,
            forced: d.forced,
        })
    }

    fn check_shapes(&self, enc_layers: usize, branches: &BranchSet) -> Result<()> {
        if enc_layers != self.layers || branches.num_layers() != self.layers {
            return Err(Error::invalid(format!(
                "policy has {} layers, encoder {enc_layers}, branches {}",
                self.layers,
                branches.num_layers()
            )));
        }
        Ok(())
    }
}

/// `tau = (E_max + E_min) / 2 * rho`, unconstrained span.
pub fn calibrate(profile: &EntropyProfile, rho: f64) -> Result<ExitPolicy> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("ratio {rho} outside [0, 1]")));
    }
    if profile.layer_means.is_empty() {
        return Err(Error::invalid("empty entropy profile"));
    }
    let tau = (profile.e_max + profile.e_min) / 2.0 * rho;
    ExitPolicy::new(tau, rho, profile.layer_means.len(), Span::Unconstrained)
}

/// Exit statistics gathered during downstream training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanStats {
    pub mu: f64,
    /// `rates[k - 1]` is the fraction of samples that exited at layer `k`.
    pub rates: Vec<f64>,
    pub k_min: usize,
    pub k_max: usize,
    pub samples: usize,
}

pub fn collect_span_stats(traces: &[ExitTrace], layers: usize) -> Result<SpanStats> {
    if traces.is_empty() {
        return Err(Error::invalid("no exit traces to summarize"));
    }
    let mut counts = vec![0usize; layers];
    for t in traces {
        if t.exit_layer == 0 || t.exit_layer > layers {
            return Err(Error::invalid(format!("exit layer {} out of range", t.exit_layer)));
        }
        counts[t.exit_layer - 1] += 1;
    }
    let n = traces.len();
    let sum: usize = traces.iter().map(|t| t.exit_layer).sum();
    Ok(SpanStats {
        mu: sum as f64 / n as f64,
        rates: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        k_min: traces.iter().map(|t| t.exit_layer).min().unwrap_or(1),
        k_max: traces.iter().map(|t| t.exit_layer).max().unwrap_or(layers),
        samples: n,
    })
}

/// Policy with the requested span built from training statistics; `tau`
/// and `rho` are kept.
pub fn constrain(policy: &ExitPolicy, kind: SpanKind, stats: &SpanStats, cutoff: f64) -> Result<ExitPolicy> {
    if stats.rates.len() != policy.layers {
        return Err(Error::invalid("span statistics do not match the policy depth"));
    }
    let span = match kind {
        SpanKind::Unconstrained => Span::Unconstrained,
        SpanKind::Mean => Span::Mean { mu: stats.mu },
        SpanKind::Threshold => Span::Threshold {
            rates: stats.rates.clone(),
            cutoff,
        },
        SpanKind::MinMax => Span::MinMax {
            k_min: stats.k_min,
            k_max: stats.k_max,
        },
    };
    ExitPolicy::new(policy.tau, policy.rho, policy.layers, span)
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    tau: f64,
    rho: f64,
    layers: usize,
    span: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cutoff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rates: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_min: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_max: Option<usize>,
}

impl ExitPolicy {
    /// Key-value text form (`key = value` lines).
    pub fn to_text(&self) -> String {
        let mut file = PolicyFile {
            tau: self.tau,
            rho: self.rho,
            layers: self.layers,
            span: self.span.kind().name().to_string(),
            mu: None,
            cutoff: None,
            rates: None,
            k_min: None,
            k_max: None,
        };
        match &self.span {
            Span::Unconstrained => {}
            Span::Mean { mu } => file.mu = Some(*mu),
            Span::Threshold { rates, cutoff } => {
                file.rates = Some(rates.clone());
                file.cutoff = Some(*cutoff);
            }
            Span::MinMax { k_min, k_max } => {
                file.k_min = Some(*k_min);
                file.k_max = Some(*k_max);
            }
        }
        toml::to_string(&file).expect("policy fields are plain values")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let file: PolicyFile =
            toml::from_str(text).map_err(|e| Error::config(format!("policy file: {e}")))?;
        let missing = |key: &str| Error::config(format!("policy file: `{}` span needs `{key}`", file.span));
        let span = match file.span.parse::<SpanKind>()? {
            SpanKind::Unconstrained => Span::Unconstrained,
            SpanKind::Mean => Span::Mean {
                mu: file.mu.ok_or_else(|| missing("mu"))?,
            },
            SpanKind::Threshold => Span::Threshold {
                rates: file.rates.clone().ok_or_else(|| missing("rates"))?,
                cutoff: file.cutoff.ok_or_else(|| missing("cutoff"))?,
            },
            SpanKind::MinMax => Span::MinMax {
                k_min: file.k_min.ok_or_else(|| missing("k_min"))?,
                k_max: file.k_max.ok_or_else(|| missing("k_max"))?,
            },
        };
        Self::new(file.tau, file.rho, file.layers, span)
    }
}
