//! Entropy-driven early-exit inference for transformer encoders.
//!
//! A frozen encoder gets one linear exit branch per layer, trained against
//! pseudo-labels from a final-layer teacher. At inference each sample stops
//! at the first layer whose branch entropy falls below a threshold
//! calibrated from the dataset's per-layer entropy profile, optionally
//! restricted to a span of layers learned during downstream training.
//!
//! Stages:
//!
//! 1. [`teacher`] and [`branches`]: train the teacher and exit branches.
//! 2. [`policy::calibrate`] and [`probe::train_downstream`]: pick the
//!    threshold and train a weighted-sum probe with exits active.
//! 3. [`probe::evaluate`]: run with exits under a chosen span.
//!
//! [`bench`] wires the stages into a reproducible pipeline with synthetic
//! data, noise sweeps and a static-truncation baseline.

pub mod bench;
pub mod branches;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod linear;
pub mod numeric;
pub mod policy;
pub mod probe;
pub mod teacher;

pub use error::{Error, Result};
