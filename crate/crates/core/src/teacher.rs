//! Final-layer teacher classifier and the pseudo-labels it emits.
//!
//! The teacher is fit to ground-truth frame labels on the last encoder layer;
//! exit branches then learn from its argmax, never from ground truth.

use crate::encoder::{Encoder, HiddenStates};
use crate::error::{Error, Result};
use crate::linear::{BatchSampler, HeadOptimizer, LinearHead, TrainSettings};
use crate::numeric::{Matrix, SeededRng};

pub const DEFAULT_PSEUDO_CLASSES: usize = 32;
const INIT_STD: f32 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherHead {
    pub(crate) head: LinearHead,
}

/// Per-frame pseudo-labels of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels(pub Vec<u32>);

impl TeacherHead {
    pub fn from_parts(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if weight.rows() < 2 {
            return Err(Error::invalid("teacher needs at least 2 classes"));
        }
        if bias.len() != weight.rows() {
            return Err(Error::invalid("teacher bias length differs from class count"));
        }
        let head = LinearHead { weight, bias };
        if !head.is_finite() {
            return Err(Error::invalid("teacher parameters must be finite"));
        }
        Ok(Self { head })
    }

    /// Seeded small-normal initialization.
    pub fn init(classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("teacher needs at least 2 classes"));
        }
        let mut rng = SeededRng::new(seed);
        Ok(Self {
            head: LinearHead::random(classes, dim, INIT_STD, &mut rng),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes()
    }

    pub fn weight(&self) -> &Matrix {
        &self.head.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.head.bias
    }

    pub fn param_hash(&self) -> u64 {
        self.head.param_hash()
    }

    pub fn logits(&self, frame: &[f32]) -> Vec<f64> {
        self.head.logits(frame)
    }

    /// `y_t = argmax_c (W h^L_t + b)_c`, lowest class on ties.
    pub fn pseudo_labels(&self, hs: &HiddenStates) -> Result<PseudoLabels> {
        if !hs.is_complete() {
            return Err(Error::invalid(format!(
                "pseudo-labels need the final layer; only {} of {} computed",
                hs.layers_computed(),
                hs.total_layers()
            )));
        }
        let last = hs.layer(hs.total_layers())?;
        self.labels_for(last)
    }

    pub(crate) fn labels_for(&self, frames: &Matrix) -> Result<PseudoLabels> {
        if frames.cols() != self.head.dim() {
            return Err(Error::invalid("hidden width differs from teacher width"));
        }
        Ok(PseudoLabels(
            (0..frames.rows())
                .map(|t| self.head.argmax(frames.row(t)) as u32)
                .collect(),
        ))
    }

    /// Fraction of frames whose argmax matches `labels`.
    pub fn accuracy(&self, frames: &[&Matrix], labels: &[&[u32]]) -> f64 {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (f, l) in frames.iter().zip(labels) {
            for t in 0..f.rows() {
                hit += (self.head.argmax(f.row(t)) as u32 == l[t]) as usize;
                total += 1;
            }
        }
        hit as f64 / total.max(1) as f64
    }
}

/// Result of a head-training run: the trained head and per-step losses.
#[derive(Debug, Clone)]
pub struct TeacherFit {
    pub head: TeacherHead,
    pub losses: Vec<f64>,
}

/// Trains the teacher on the encoder's final layer.
pub fn train_teacher(
    enc: &Encoder,
    inputs: &[Matrix],
    labels: &[Vec<u32>],
    classes: usize,
    settings: &TrainSettings,
) -> Result<TeacherFit> {
    if inputs.is_empty() {
        return Err(Error::invalid("teacher training set is empty"));
    }
    let states = enc.forward_batch(inputs)?;
    let last: Vec<&Matrix> = states
        .iter()
        .map(|h| h.layer(h.total_layers()))
        .collect::<Result<_>>()?;
    let labels: Vec<&[u32]> = labels.iter().map(Vec::as_slice).collect();
    train_teacher_on_features(&last, &labels, classes, settings)
}

/// Trains the teacher on precomputed final-layer frames.
pub fn train_teacher_on_features(
    frames: &[&Matrix],
    labels: &[&[u32]],
    classes: usize,
    settings: &TrainSettings,
) -> Result<TeacherFit> {
    settings.validate()?;
    if frames.is_empty() {
        return Err(Error::invalid("teacher training set is empty"));
    }
    if frames.len() != labels.len() {
        return Err(Error::invalid("frames and labels differ in length"));
    }
    for (f, l) in frames.iter().zip(labels) {
        if f.rows() != l.len() || f.rows() == 0 {
            return Err(Error::invalid("label count differs from frame count"));
        }
        if let Some(y) = l.iter().find(|y| **y as usize >= classes) {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
    }
    let dim = frames[0].cols();
    let mut teacher = TeacherHead::init(classes, dim, settings.seed)?;
    let mut opt = HeadOptimizer::new(settings.optimizer, &teacher.head);
    let mut sampler = BatchSampler::new(frames.len(), settings.batch, settings.seed ^ 0x7eac);
    let mut losses = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let idx = sampler.next_batch();
        let batch: Vec<(&Matrix, &[u32])> = idx.iter().map(|&i| (frames[i], labels[i])).collect();
        let (loss, grads) = teacher.head.batch_grad(&batch);
        opt.step(&mut teacher.head, &grads, settings.lr);
        losses.push(loss);
    }
    Ok(TeacherFit {
        head: teacher,
        losses,
    })
}
