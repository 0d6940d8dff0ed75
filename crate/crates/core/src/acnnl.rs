//! Centralized layer-wise analytic training.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoding::{encode_labels, EncodingSet};
use crate::error::{Error, Result};
use crate::model::{forward_to_layer, ModelSpec, WeightSet};
use crate::numerics::{solve_regularized_ls, LayerStats};

pub const DEFAULT_BATCH_SIZE: usize = 256;

/// Work done while accumulating one layer's moments.
///
/// `forwards` counts passes through the already trained prefix (none for the
/// first layer); `matmuls` counts the label encoding product plus the two
/// moment products per batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub batches: usize,
    pub forwards: usize,
    pub matmuls: usize,
    pub rows: usize,
}

impl OpCount {
    pub fn add(&mut self, other: OpCount) {
        self.batches += other.batches;
        self.forwards += other.forwards;
        self.matmuls += other.matmuls;
        self.rows += other.rows;
    }
}

/// Accumulates `XᵀX` and `XᵀZ̄` for trainable layer `layer` over the samples
/// in `order`, `batch_size` at a time. A trailing partial batch is kept.
///
/// Layers before `layer` must already carry weights.
#[allow(clippy::too_many_arguments)]
pub fn layer_stats(
    data: &Dataset,
    order: &[usize],
    batch_size: usize,
    weights: &WeightSet,
    spec: &ModelSpec,
    enc: &EncodingSet,
    layer: usize,
) -> Result<(LayerStats, OpCount)> {
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    if let Some(&bad) = order.iter().find(|&&i| i >= data.len()) {
        return Err(Error::domain(format!("sample index {bad} beyond {} samples", data.len())));
    }
    let info = spec.trainable(layer);
    let mut stats = LayerStats::zeros(info.in_dim, info.out_dim);
    let mut ops = OpCount::default();
    for chunk in order.chunks(batch_size) {
        let x = data.features.select_rows(chunk);
        let y = data.labels.select_rows(chunk);
        let x_l = forward_to_layer(&x, weights, spec, layer)?;
        let z = encode_labels(&y, enc, spec, layer)?;
        let z = if info.rows_per_sample > 1 {
            z.repeat_rows(info.rows_per_sample)
        } else {
            z
        };
        stats.accumulate(&x_l, &z)?;
        ops.add(OpCount {
            batches: 1,
            forwards: usize::from(layer > 0),
            matmuls: if spec.is_output(layer) { 2 } else { 3 },
            rows: chunk.len(),
        });
    }
    Ok((stats, ops))
}

/// Solves one layer from its summed moments.
pub fn solve_layer(stats: &LayerStats, gamma: f64) -> Result<crate::Matrix> {
    solve_regularized_ls(&stats.gram, &stats.cross, gamma)
}

/// Trains every layer in order on the whole dataset.
pub fn train_acnnl(
    data: &Dataset,
    spec: &ModelSpec,
    enc: &EncodingSet,
    gamma: f64,
    batch_size: usize,
) -> Result<WeightSet> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut weights = WeightSet::empty(spec);
    for layer in 0..spec.depth() {
        let (stats, _) = layer_stats(data, &order, batch_size, &weights, spec, enc, layer)?;
        weights.install(spec, layer, solve_layer(&stats, gamma)?)?;
    }
    Ok(weights)
}
