//! Shared label-encoding matrices and pseudo-label construction.
//!
//! Hidden layer `l` is trained against `Z_l = Y · Q_l`, where `Q_l` is a
//! `d_y × d_l` standard-normal matrix. Every participant regenerates the same
//! set from a broadcast seed, so the generator is fixed and documented:
//!
//! * one SplitMix64 stream per hidden layer, with initial state
//!   `seed + n · 0x9E3779B97F4A7C15` (wrapping), where `n` is the one-based
//!   hidden-layer number;
//! * uniforms `u = (next_u64 >> 11) · 2⁻⁵³`, drawn in pairs `(u1, u2)`;
//! * Box–Muller: `r = sqrt(−2·ln(1 − u1))`, emitting `r·cos(2π·u2)` then
//!   `r·sin(2π·u2)`;
//! * entries filled row-major.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::numerics::{matmul, Matrix};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Standard-normal stream over SplitMix64, see the module docs.
struct NormalStream {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl NormalStream {
    fn new(state: u64) -> Self {
        NormalStream {
            rng: SplitMix64::from_seed(state.to_le_bytes()),
            spare: None,
        }
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// The label-encoding matrices for every hidden layer (the output layer needs
/// none).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingSet {
    seed: u64,
    mats: Vec<Matrix>,
}

impl EncodingSet {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Matrices indexed by zero-based hidden layer.
    pub fn matrices(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&Matrix> {
        self.mats.get(layer)
    }
}

pub fn make_encoding_set(seed: u64, spec: &ModelSpec) -> EncodingSet {
    let classes = spec.classes();
    let hidden = spec.depth() - 1;
    let mats = (0..hidden)
        .map(|l| {
            let state = seed.wrapping_add((l as u64 + 1).wrapping_mul(GOLDEN_GAMMA));
            let mut stream = NormalStream::new(state);
            let cols = spec.trainable(l).out_dim;
            Matrix::from_fn(classes, cols, |_, _| stream.next())
        })
        .collect();
    EncodingSet { seed, mats }
}

/// Pseudo labels for trainable layer `layer`: `Y·Q_l` for hidden layers, `Y`
/// itself for the output layer.
pub fn encode_labels(y: &Matrix, enc: &EncodingSet, spec: &ModelSpec, layer: usize) -> Result<Matrix> {
    if y.cols() != spec.classes() {
        return Err(Error::shape(format!(
            "labels have {} columns, model has {} classes",
            y.cols(),
            spec.classes()
        )));
    }
    if spec.is_output(layer) {
        return Ok(y.clone());
    }
    let q = enc
        .get(layer)
        .ok_or_else(|| Error::shape(format!("no encoding matrix for layer {layer}")))?;
    matmul(y, q)
}

/// The encoding matrix with the fewest columns; ties go to the lowest layer.
pub fn select_encoder(enc: &EncodingSet) -> Result<&Matrix> {
    let mut best: Option<&Matrix> = None;
    for m in &enc.mats {
        if best.is_none_or(|b| m.cols() < b.cols()) {
            best = Some(m);
        }
    }
    best.ok_or(Error::EmptySet)
}

/// Projects a dataset's empirical class-frequency vector through `q_enc`.
///
/// `labels` are one-hot rows. The result has one entry per column of `q_enc`
/// and depends only on the class counts, never on sample order.
pub fn encode_distribution(labels: &Matrix, q_enc: &Matrix) -> Result<Vec<f64>> {
    let n = labels.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if labels.cols() != q_enc.rows() {
        return Err(Error::shape(format!(
            "labels have {} classes but the encoder has {} rows",
            labels.cols(),
            q_enc.rows()
        )));
    }
    let mut counts = vec![0.0; labels.cols()];
    for i in 0..n {
        for (c, v) in labels.row(i).iter().enumerate() {
            counts[c] += v;
        }
    }
    let mut h = vec![0.0; q_enc.cols()];
    for (c, count) in counts.iter().enumerate() {
        let freq = count / n as f64;
        for (hj, q) in h.iter_mut().zip(q_enc.row(c)) {
            *hj += freq * q;
        }
    }
    Ok(h)
}
