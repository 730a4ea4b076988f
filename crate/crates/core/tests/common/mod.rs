//! Independent reference implementations shared by the integration tests.
//! Everything here is plain f64 arithmetic written without the library's
//! helpers, so agreement is evidence rather than tautology.

#![allow(dead_code)]

use earlyexit::bench::BenchConfig;
use earlyexit::encoder::HiddenStates;
use earlyexit::linear::LinearHead;
use earlyexit::numeric::{Matrix, SeededRng};
use earlyexit::policy::Span;
use earlyexit::probe::{normalize_prefix, DownstreamHead, SampleLabels, Task, WeightMode};

/// Small pipeline config that trains in a few seconds.
pub fn tiny_config() -> BenchConfig {
    let overrides: Vec<String> = [
        "data.frames=12",
        "data.branch_train=48",
        "data.heldout=16",
        "data.downstream_train=40",
        "data.test=40",
        "encoder.num_layers=4",
        "encoder.model_dim=16",
        "encoder.num_heads=2",
        "encoder.ffn_dim=32",
        "encoder.max_frames=16",
        "teacher.steps=40",
        "branches.steps=40",
        "downstream.steps=40",
        "eval.rhos=[0.7]",
        "eval.timing_samples=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    BenchConfig::from_toml_with("", &overrides).expect("tiny config is valid")
}

/// `log Σ exp(z) - z_y`, computed directly.
pub fn ce(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    b.iter()
        .enumerate()
        .map(|(c, bc)| bc + (0..d).map(|i| w[c * d + i] * x[i]).sum::<f64>())
        .collect()
}

/// Mean over sequences of the mean frame cross-entropy of `W x + b`.
pub fn branch_loss(w: &[f64], b: &[f64], batch: &[(Vec<Vec<f64>>, Vec<u32>)]) -> f64 {
    let mut total = 0.0;
    for (frames, labels) in batch {
        let per: f64 = frames
            .iter()
            .zip(labels)
            .map(|(x, &y)| ce(&affine(w, b, x), y as usize))
            .sum();
        total += per / frames.len() as f64;
    }
    total / batch.len() as f64
}

/// Downstream loss from raw layer weights, given already layer-normalized
/// prefix layers `prefix[j][t]`.
#[allow(clippy::too_many_arguments)]
pub fn downstream_loss(
    raw: &[f64],
    w: &[f64],
    b: &[f64],
    prefix: &[Vec<Vec<f64>>],
    frame_labels: &[u32],
    utterance: u32,
    task: Task,
    mode: WeightMode,
) -> f64 {
    let k = prefix.len();
    let support = match mode {
        WeightMode::Prefix => k,
        WeightMode::Global => raw.len(),
    };
    let s = softmax(&raw[..support]);
    let t_len = prefix[0].len();
    let d = prefix[0][0].len();
    let feats: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            (0..d)
                .map(|i| (0..k).map(|j| s[j] * prefix[j][t][i]).sum())
                .collect()
        })
        .collect();
    match task {
        Task::Frame => {
            feats
                .iter()
                .zip(frame_labels)
                .map(|(f, &y)| ce(&affine(w, b, f), y as usize))
                .sum::<f64>()
                / t_len as f64
        }
        Task::Utterance => {
            let pooled: Vec<f64> = (0..d)
                .map(|i| feats.iter().map(|f| f[i]).sum::<f64>() / t_len as f64)
                .collect();
            ce(&affine(w, b, &pooled), utterance as usize)
        }
    }
}

/// Layer norm with unit gain, zero bias and biased variance.
pub fn layer_norm(v: &[f32]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    v.iter().map(|&x| (x as f64 - mean) / (var + 1e-5).sqrt()).collect()
}

/// Relative error with a floor so that two tiny values compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        return 0.0;
    }
    (a - b).abs() / scale
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &[f64], i: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Allowed layers of a span, written out from its definition.
pub fn allowed_layers(span: &Span, layers: usize) -> Vec<bool> {
    (1..=layers)
        .map(|k| match span {
            Span::Unconstrained => true,
            Span::Mean { mu } => (k as f64) >= mu.floor() && (k as f64) <= mu.ceil(),
            Span::Threshold { rates, cutoff } => rates[k - 1] > *cutoff,
            Span::MinMax { k_min, k_max } => *k_min <= k && k <= *k_max,
        })
        .collect()
}

/// First allowed layer with entropy below `tau`, else the deepest allowed
/// layer (forced).
pub fn brute_force_exit(entropies: &[f64], tau: f64, allowed: &[bool]) -> (usize, bool) {
    let candidates: Vec<usize> = (1..=entropies.len()).filter(|&k| allowed[k - 1]).collect();
    match candidates.iter().find(|&&k| entropies[k - 1] < tau) {
        Some(&k) => (k, false),
        None => (*candidates.last().expect("non-empty span"), true),
    }
}

/// Random span over `layers` layers that allows at least one layer.
pub fn random_span(rng: &mut SeededRng, layers: usize) -> Span {
    match rng.below(4) {
        0 => Span::Unconstrained,
        1 => Span::Mean {
            mu: 1.0 + rng.uniform() * (layers - 1) as f64,
        },
        2 => {
            let cutoff = 0.05 + 0.5 * rng.uniform();
            let mut rates: Vec<f64> = (0..layers).map(|_| rng.uniform()).collect();
            let pick = rng.below(layers);
            rates[pick] = cutoff + (1.0 - cutoff) * 0.5;
            Span::Threshold { rates, cutoff }
        }
        _ => {
            let a = 1 + rng.below(layers);
            let b = 1 + rng.below(layers);
            Span::MinMax {
                k_min: a.min(b),
                k_max: a.max(b),
            }
        }
    }
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| (rng.normal() * std) as f32).collect();
    Matrix::from_vec(rows, cols, data).expect("finite values")
}

pub fn to_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|t| m.row(t).iter().map(|&v| v as f64).collect())
        .collect()
}

// ---- finite-difference gradient checks ----------------------------------

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Worst relative error between the analytic branch gradient and central
/// differences of [`branch_loss`].
pub fn branch_grad_error(seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let (classes, dim) = (5, 6);
    let head = LinearHead::random(classes, dim, 0.5, &mut rng);
    let mats: Vec<Matrix> = (0..3).map(|i| random_matrix(&mut rng, 4 + i, dim, 1.0)).collect();
    let labels: Vec<Vec<u32>> = mats
        .iter()
        .map(|m| (0..m.rows()).map(|_| rng.below(classes) as u32).collect())
        .collect();
    let batch: Vec<(&Matrix, &[u32])> = mats.iter().zip(&labels).map(|(m, l)| (m, l.as_slice())).collect();
    let (loss, grads) = head.batch_grad(&batch);

    let oracle_batch: Vec<(Vec<Vec<f64>>, Vec<u32>)> = mats.iter().map(to_f64).zip(labels.clone()).collect();
    let w = widen(head.weight.data());
    let b = widen(&head.bias);
    assert!(rel_err(loss, branch_loss(&w, &b, &oracle_batch)) < 1e-9);

    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let fd = central_diff(&w, i, FD_STEP, |p| branch_loss(p, &b, &oracle_batch));
        worst = worst.max(rel_err(grads.weight[i], fd));
    }
    for i in 0..b.len() {
        let fd = central_diff(&b, i, FD_STEP, |p| branch_loss(&w, p, &oracle_batch));
        worst = worst.max(rel_err(grads.bias[i], fd));
    }
    worst
}

/// Same check for the downstream head with the given exit layer.
pub fn downstream_grad_error(task: Task, mode: WeightMode, exit: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let (layers, t_len, dim, classes) = (4, 5, 6, 4);
    let hs = HiddenStates::new(
        (0..layers).map(|_| random_matrix(&mut rng, t_len, dim, 1.0)).collect(),
        layers,
    )
    .unwrap();
    let prefix = normalize_prefix(&hs, exit).unwrap();
    let raw = f32s(&(0..layers).map(|_| rng.normal() * 0.7).collect::<Vec<_>>());
    let pw = random_matrix(&mut rng, classes, dim, 0.4);
    let pb = f32s(&(0..classes).map(|_| rng.normal() * 0.1).collect::<Vec<_>>());
    let head = DownstreamHead::from_parts(raw.clone(), pw.clone(), pb.clone(), task, mode).unwrap();
    let labels = SampleLabels {
        frames: (0..t_len).map(|_| rng.below(classes) as u32).collect(),
        utterance: rng.below(classes) as u32,
    };
    let (loss, grads) = head.loss_and_grads(&prefix, &labels).unwrap();

    let oracle_prefix: Vec<Vec<Vec<f64>>> = hs.layers()[..exit]
        .iter()
        .map(|m| (0..t_len).map(|t| layer_norm(m.row(t))).collect())
        .collect();
    let (r, w, b) = (widen(&raw), widen(pw.data()), widen(&pb));
    let f = |r: &[f64], w: &[f64], b: &[f64]| {
        downstream_loss(r, w, b, &oracle_prefix, &labels.frames, labels.utterance, task, mode)
    };
    assert!(rel_err(loss, f(&r, &w, &b)) < 1e-6, "loss {loss} vs oracle {}", f(&r, &w, &b));

    let mut worst: f64 = 0.0;
    for i in 0..r.len() {
        let fd = central_diff(&r, i, FD_STEP, |p| f(p, &w, &b));
        worst = worst.max(rel_err(grads.layer_weights[i], fd));
    }
    for i in 0..w.len() {
        let fd = central_diff(&w, i, FD_STEP, |p| f(&r, p, &b));
        worst = worst.max(rel_err(grads.probe_weight[i], fd));
    }
    for i in 0..b.len() {
        let fd = central_diff(&b, i, FD_STEP, |p| f(&r, &w, p));
        worst = worst.max(rel_err(grads.probe_bias[i], fd));
    }
    worst
}
