//! Synthetic labelled sequences and controlled-SNR noise injection.
//!
//! Per-frame classes follow a sticky Markov chain; each frame's input is its
//! class prototype plus Gaussian jitter. The ground-truth label of a frame is
//! the majority class inside a centred context window, so frame-local
//! features are not enough to recover it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, SeededRng};
use crate::probe::SampleLabels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_sequences: usize,
    pub frames: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub context_window: usize,
    pub markov_self_prob: f64,
    /// Standard deviation of the per-frame Gaussian jitter.
    pub jitter: f64,
    /// Seed of the class prototypes; splits that share it share classes.
    pub prototype_seed: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_sequences: 2000,
            frames: 32,
            input_dim: 16,
            num_classes: 32,
            context_window: 9,
            markov_self_prob: 0.85,
            jitter: 0.7,
            prototype_seed: 7,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.frames == 0 || self.input_dim == 0 {
            return Err(Error::config("sequences, frames and input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 label classes"));
        }
        if self.context_window.is_multiple_of(2) || self.context_window > self.frames {
            return Err(Error::config(format!(
                "context_window {} must be odd and at most {} frames",
                self.context_window, self.frames
            )));
        }
        if !(0.0..=1.0).contains(&self.markov_self_prob) {
            return Err(Error::config("markov_self_prob outside [0, 1]"));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::config("jitter must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Noise level of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Clean => f.write_str("clean"),
            Snr::Db(db) => write!(f, "{db}"),
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("clean") {
            return Ok(Snr::Clean);
        }
        let db: f64 = s
            .parse()
            .map_err(|_| Error::config(format!("SNR `{s}` is neither `clean` nor a number")))?;
        if !db.is_finite() {
            return Err(Error::config("SNR must be finite"));
        }
        Ok(Snr::Db(db))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    /// Per-dimension sinusoids across time.
    Tonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr: Snr,
    pub kind: NoiseKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub entries: Vec<(NoiseSpec, f64)>,
}

impl MixtureSpec {
    /// 40% clean, 30% at 10 dB, 20% at 5 dB, 10% at 0 dB.
    pub fn standard(kind: NoiseKind, seed: u64) -> Self {
        let spec = |snr| NoiseSpec { snr, kind, seed };
        Self {
            entries: vec![
                (spec(Snr::Clean), 0.4),
                (spec(Snr::Db(10.0)), 0.3),
                (spec(Snr::Db(5.0)), 0.2),
                (spec(Snr::Db(0.0)), 0.1),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::config("mixture has no entries"));
        }
        if self.entries.iter().any(|(_, f)| !(*f >= 0.0)) {
            return Err(Error::config("mixture fractions must be nonnegative"));
        }
        let sum: f64 = self.entries.iter().map(|(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("mixture fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Matrix,
    /// Ground-truth frame labels (window majority).
    pub labels: Vec<u32>,
    /// Underlying per-frame Markov-chain classes.
    pub classes: Vec<u32>,
    pub snr: Snr,
}

impl Sequence {
    /// Majority label of the whole sequence, lowest class on ties.
    pub fn utterance_label(&self, num_classes: usize) -> u32 {
        let mut counts = vec![0usize; num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn inputs(&self) -> Vec<Matrix> {
        self.sequences.iter().map(|s| s.frames.clone()).collect()
    }

    pub fn frame_labels(&self) -> Vec<Vec<u32>> {
        self.sequences.iter().map(|s| s.labels.clone()).collect()
    }

    pub fn sample_labels(&self) -> Vec<SampleLabels> {
        self.sequences
            .iter()
            .map(|s| SampleLabels {
                frames: s.labels.clone(),
                utterance: s.utterance_label(self.num_classes),
            })
            .collect()
    }

    pub fn tags(&self) -> Vec<Snr> {
        self.sequences.iter().map(|s| s.snr).collect()
    }

    /// Stable byte encoding, used for determinism checks and dataset files.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"EEXITDS\0");
        out.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u64).to_le_bytes());
        for s in &self.sequences {
            out.extend_from_slice(&(s.frames.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(s.frames.cols() as u64).to_le_bytes());
            match s.snr {
                Snr::Clean => out.extend_from_slice(&f64::NAN.to_bits().to_le_bytes()),
                Snr::Db(db) => out.extend_from_slice(&db.to_le_bytes()),
            }
            for v in s.frames.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for l in s.labels.iter().chain(&s.classes) {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }
}

impl Dataset {
    /// Inverse of [`Dataset::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != b"EEXITDS\0" {
            return Err(Error::format(0, "expected dataset magic \"EEXITDS\\0\""));
        }
        let num_classes = r.u64()? as usize;
        let count = r.u64()? as usize;
        let mut sequences = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let db = f64::from_le_bytes(r.array()?);
            let snr = if db.is_nan() { Snr::Clean } else { Snr::Db(db) };
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::format(r.pos, "dataset frame shape overflows"))?;
            let data = r.words(n)?.map(f32::from_le_bytes).collect();
            let labels: Vec<u32> = r.words(rows)?.map(u32::from_le_bytes).collect();
            let classes: Vec<u32> = r.words(rows)?.map(u32::from_le_bytes).collect();
            if labels.iter().chain(&classes).any(|&l| l as usize >= num_classes) {
                return Err(Error::format(r.pos, "dataset label outside the class range"));
            }
            sequences.push(Sequence {
                frames: Matrix::from_vec(rows, cols, data)?,
                labels,
                classes,
                snr,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after dataset"));
        }
        Ok(Dataset { sequences, num_classes })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(self.pos, format!("truncated dataset: need {n} more bytes"))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn words(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; 4]> + 'a> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| c.try_into().expect("4 bytes")))
    }
}

fn prototypes(spec: &SynthSpec) -> Vec<Vec<f32>> {
    let mut rng = SeededRng::derive(spec.prototype_seed, 0x9807);
    // Unit-norm directions scaled so each coordinate has unit variance.
    let scale = (spec.input_dim as f64).sqrt();
    (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| (x / norm * scale) as f32).collect()
        })
        .collect()
}

/// Majority class in a centred window (clipped at the edges). Ties go to the
/// centre frame's class when it is among the winners, else the lowest class.
pub fn window_majority(classes: &[u32], window: usize, num_classes: usize) -> Vec<u32> {
    let half = window / 2;
    let mut counts = vec![0usize; num_classes];
    (0..classes.len())
        .map(|t| {
            counts.iter_mut().for_each(|c| *c = 0);
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(classes.len() - 1);
            for &c in &classes[lo..=hi] {
                counts[c as usize] += 1;
            }
            let best = *counts.iter().max().expect("nonempty");
            if counts[classes[t] as usize] == best {
                classes[t]
            } else {
                counts.iter().position(|&c| c == best).expect("max exists") as u32
            }
        })
        .collect()
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec);
    let mut rng = SeededRng::new(spec.seed);
    let c = spec.num_classes;
    let sequences = (0..spec.num_sequences)
        .map(|_| {
            let mut classes = Vec::with_capacity(spec.frames);
            let mut cur = rng.below(c) as u32;
            for t in 0..spec.frames {
                if t > 0 && rng.uniform() >= spec.markov_self_prob {
                    // uniform over the other classes
                    let step = 1 + rng.below(c - 1) as u32;
                    cur = (cur + step) % c as u32;
                }
                classes.push(cur);
            }
            let mut frames = Matrix::zeros(spec.frames, spec.input_dim);
            for (t, &cls) in classes.iter().enumerate() {
                for (x, p) in frames.row_mut(t).iter_mut().zip(&protos[cls as usize]) {
                    *x = (*p as f64 + spec.jitter * rng.normal()) as f32;
                }
            }
            let labels = window_majority(&classes, spec.context_window, c);
            Sequence {
                frames,
                labels,
                classes,
                snr: Snr::Clean,
            }
        })
        .collect();
    Ok(Dataset {
        sequences,
        num_classes: c,
    })
}

/// Raw (unscaled) noise for sequence `index`.
fn raw_noise(kind: NoiseKind, seed: u64, index: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut rng = SeededRng::derive(seed, index as u64);
    match kind {
        NoiseKind::Gaussian => (0..rows * cols).map(|_| rng.normal()).collect(),
        NoiseKind::Tonal => {
            let tones: Vec<(f64, f64, f64)> = (0..cols)
                .map(|_| {
                    let freq = 0.05 + 0.4 * rng.uniform();
                    let phase = std::f64::consts::TAU * rng.uniform();
                    let amp = 0.5 + rng.uniform();
                    (freq, phase, amp)
                })
                .collect();
            let mut out = Vec::with_capacity(rows * cols);
            for t in 0..rows {
                for &(f, p, a) in &tones {
                    out.push(a * (std::f64::consts::TAU * f * t as f64 + p).sin());
                }
            }
            out
        }
    }
}

/// Noise for `frames` scaled so that `10 log10(Σx² / Σ(αn)²) = snr_db`.
/// `None` when the clean power is zero (SNR undefined).
pub fn scaled_noise(frames: &Matrix, snr_db: f64, kind: NoiseKind, seed: u64, index: usize) -> Option<Vec<f64>> {
    let signal: f64 = frames.data().iter().map(|&x| (x as f64).powi(2)).sum();
    if signal == 0.0 {
        return None;
    }
    let noise = raw_noise(kind, seed, index, frames.rows(), frames.cols());
    let noise_power: f64 = noise.iter().map(|n| n * n).sum();
    if noise_power == 0.0 {
        return None;
    }
    let alpha = (signal / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
    Some(noise.into_iter().map(|n| alpha * n).collect())
}

/// Noised copy of a clean dataset, plus indices of sequences that were left
/// clean because their SNR is undefined.
pub fn add_noise(data: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, Vec<usize>)> {
    let mut out = data.clone();
    let mut skipped = Vec::new();
    for (i, s) in out.sequences.iter_mut().enumerate() {
        if s.snr != Snr::Clean {
            return Err(Error::invalid(format!("sequence {i} is already noised")));
        }
        apply_noise(s, spec, i, &mut skipped);
    }
    Ok((out, skipped))
}

fn apply_noise(s: &mut Sequence, spec: &NoiseSpec, index: usize, skipped: &mut Vec<usize>) {
    let Snr::Db(db) = spec.snr else {
        return;
    };
    match scaled_noise(&s.frames, db, spec.kind, spec.seed, index) {
        Some(noise) => {
            for (x, n) in s.frames.data_mut().iter_mut().zip(noise) {
                *x = (*x as f64 + n) as f32;
            }
            s.snr = spec.snr;
        }
        None => skipped.push(index),
    }
}

/// Partition sizes by largest-remainder rounding; ties go to earlier entries.
pub fn partition_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Dataset in which each mixture entry noises its share of the samples.
/// Returns the mixed dataset and each sample's entry index.
pub fn make_mixture(data: &Dataset, spec: &MixtureSpec, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    spec.validate()?;
    let fractions: Vec<f64> = spec.entries.iter().map(|(_, f)| *f).collect();
    let sizes = partition_sizes(data.len(), &fractions);
    let mut order: Vec<usize> = (0..data.len()).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let mut assignment = vec![0usize; data.len()];
    let mut cursor = 0;
    for (entry, &size) in sizes.iter().enumerate() {
        for &i in &order[cursor..cursor + size] {
            assignment[i] = entry;
        }
        cursor += size;
    }
    let mut out = data.clone();
    let mut skipped = Vec::new();
    for (i, s) in out.sequences.iter_mut().enumerate() {
        apply_noise(s, &spec.entries[assignment[i]].0, i, &mut skipped);
    }
    Ok((out, assignment))
}
