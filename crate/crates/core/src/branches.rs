//! Per-layer linear exit branches trained against teacher pseudo-labels,
//! and the utterance-level branch entropy that drives exit decisions.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, HiddenStates};
use crate::error::{Error, Result};
use crate::linear::{BatchSampler, HeadOptimizer, LinearHead, TrainSettings};
use crate::numeric::{hash_f32s, stable_mean, Matrix};
use crate::teacher::TeacherHead;

/// One linear classifier per encoder layer. `branch(k)` reads `h^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet {
    pub(crate) heads: Vec<LinearHead>,
}

impl BranchSet {
    /// Zero weights and biases: every branch posterior is uniform.
    pub fn zeros(layers: usize, classes: usize, dim: usize) -> Self {
        Self {
            heads: (0..layers).map(|_| LinearHead::zeros(classes, dim)).collect(),
        }
    }

    pub fn from_heads(heads: Vec<LinearHead>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::invalid("branch set needs at least one layer"));
        }
        let shape = heads[0].weight.shape();
        if heads.iter().any(|h| h.weight.shape() != shape || h.bias.len() != shape.0) {
            return Err(Error::invalid("branches disagree on shape"));
        }
        if heads.iter().any(|h| !h.is_finite()) {
            return Err(Error::invalid("branch parameters must be finite"));
        }
        Ok(Self { heads })
    }

    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].classes()
    }

    pub fn dim(&self) -> usize {
        self.heads[0].dim()
    }

    pub fn branch(&self, k: usize) -> Result<&LinearHead> {
        if k == 0 || k > self.heads.len() {
            return Err(Error::invalid(format!("no branch for layer {k}")));
        }
        Ok(&self.heads[k - 1])
    }

    pub fn param_hash(&self) -> u64 {
        hash_f32s(
            self.heads
                .iter()
                .flat_map(|h| [h.weight.data(), h.bias.as_slice()]),
        )
    }

    /// `E^k = (1/T) Σ_t Σ_c -p ln p` over branch `k`'s frame posteriors.
    pub fn branch_entropy(&self, hs: &HiddenStates, k: usize) -> Result<f64> {
        let frames = hs.layer(k)?;
        self.entropy_of_frames(frames, k)
    }

    /// Entropy of branch `k` applied to the frames of layer `k`.
    pub fn entropy_of_frames(&self, frames: &Matrix, k: usize) -> Result<f64> {
        let head = self.branch(k)?;
        if frames.cols() != head.dim() {
            return Err(Error::invalid("hidden width differs from branch width"));
        }
        Ok(head.mean_entropy(frames))
    }

    /// Mean cross-entropy of each branch against the teacher's pseudo-labels.
    pub fn pseudo_label_losses(&self, states: &[HiddenStates], teacher: &TeacherHead) -> Result<Vec<f64>> {
        let labels = pseudo_label_all(states, teacher)?;
        Ok((1..=self.num_layers())
            .map(|k| {
                stable_mean(states.iter().zip(&labels).map(|(hs, y)| {
                    self.heads[k - 1].sequence_loss(&hs.layers()[k - 1], y)
                }))
            })
            .collect())
    }
}

fn pseudo_label_all(states: &[HiddenStates], teacher: &TeacherHead) -> Result<Vec<Vec<u32>>> {
    states
        .iter()
        .map(|hs| teacher.pseudo_labels(hs).map(|p| p.0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct BranchFit {
    pub branches: BranchSet,
    /// `losses[step][layer - 1]`.
    pub losses: Vec<Vec<f64>>,
}

/// Trains all branches jointly: each minibatch is pseudo-labelled by the
/// frozen teacher once and every branch takes one step on it.
pub fn train_branches(
    enc: &Encoder,
    teacher: &TeacherHead,
    inputs: &[Matrix],
    settings: &TrainSettings,
) -> Result<BranchFit> {
    if inputs.is_empty() {
        return Err(Error::invalid("branch training set is empty"));
    }
    let states = enc.forward_batch(inputs)?;
    train_branches_on_states(&states, teacher, settings)
}

/// Same as [`train_branches`] on precomputed full-depth hidden states.
pub fn train_branches_on_states(
    states: &[HiddenStates],
    teacher: &TeacherHead,
    settings: &TrainSettings,
) -> Result<BranchFit> {
    settings.validate()?;
    if states.is_empty() {
        return Err(Error::invalid("branch training set is empty"));
    }
    let labels = pseudo_label_all(states, teacher)?;
    let layers = states[0].total_layers();
    let mut branches = BranchSet::zeros(layers, teacher.num_classes(), states[0].dim());
    let mut opts: Vec<HeadOptimizer> = branches
        .heads
        .iter()
        .map(|h| HeadOptimizer::new(settings.optimizer, h))
        .collect();
    let mut sampler = BatchSampler::new(states.len(), settings.batch, settings.seed);
    let mut losses = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let idx = sampler.next_batch();
        let mut step_losses = Vec::with_capacity(layers);
        for (k, (head, opt)) in branches.heads.iter_mut().zip(&mut opts).enumerate() {
            let batch: Vec<(&Matrix, &[u32])> = idx
                .iter()
                .map(|&i| (&states[i].layers()[k], labels[i].as_slice()))
                .collect();
            let (loss, grads) = head.batch_grad(&batch);
            opt.step(head, &grads, settings.lr);
            step_losses.push(loss);
        }
        losses.push(step_losses);
    }
    Ok(BranchFit { branches, losses })
}

/// Dataset-level per-layer mean entropies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub layer_means: Vec<f64>,
    pub e_max: f64,
    pub e_min: f64,
    pub samples: usize,
}

impl EntropyProfile {
    pub fn from_layer_means(layer_means: Vec<f64>, samples: usize) -> Result<Self> {
        if layer_means.is_empty() || samples == 0 {
            return Err(Error::invalid("entropy profile needs samples and layers"));
        }
        if layer_means.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::invalid("entropies must be finite and nonnegative"));
        }
        let e_max = layer_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e_min = layer_means.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            layer_means,
            e_max,
            e_min,
            samples,
        })
    }
}

pub fn entropy_profile(enc: &Encoder, branches: &BranchSet, inputs: &[Matrix]) -> Result<EntropyProfile> {
    if inputs.is_empty() {
        return Err(Error::invalid("entropy profile of an empty dataset"));
    }
    let states = enc.forward_batch(inputs)?;
    profile_from_states(branches, &states)
}

pub fn profile_from_states(branches: &BranchSet, states: &[HiddenStates]) -> Result<EntropyProfile> {
    if states.is_empty() {
        return Err(Error::invalid("entropy profile of an empty dataset"));
    }
    let per_sample: Vec<Vec<f64>> = states
        .iter()
        .map(|hs| {
            (1..=branches.num_layers())
                .map(|k| branches.branch_entropy(hs, k))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let means = (0..branches.num_layers())
        .map(|k| stable_mean(per_sample.iter().map(|e| e[k])))
        .collect();
    EntropyProfile::from_layer_means(means, states.len())
}
