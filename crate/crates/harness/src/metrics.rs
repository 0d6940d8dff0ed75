//! Accuracy and per-round records.

use fedacnnl_core::data::Dataset;
use fedacnnl_core::model::{predict, ModelSpec, WeightSet};
use fedacnnl_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Correct predictions over all shards divided by all test samples.
    pub overall: f64,
    pub per_client: Vec<f64>,
    pub correct: Vec<usize>,
    pub totals: Vec<usize>,
}

/// Scores `models[i]` on `shards[i]`.
pub fn evaluate_accuracy(models: &[&WeightSet], shards: &[Dataset], spec: &ModelSpec) -> Result<Accuracy> {
    if models.len() != shards.len() {
        return Err(Error::Shape(format!("{} models for {} shards", models.len(), shards.len())));
    }
    let mut correct = Vec::with_capacity(shards.len());
    let mut totals = Vec::with_capacity(shards.len());
    for (w, shard) in models.iter().zip(shards) {
        let pred = predict(&shard.features, w, spec)?;
        correct.push(pred.iter().enumerate().filter(|&(i, &p)| shard.class_of(i) == p).count());
        totals.push(shard.len());
    }
    let all: usize = totals.iter().sum();
    if all == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(Accuracy {
        overall: correct.iter().sum::<usize>() as f64 / all as f64,
        per_client: correct
            .iter()
            .zip(&totals)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        correct,
        totals,
    })
}

/// Same model on every shard.
pub fn evaluate_shared(model: &WeightSet, shards: &[Dataset], spec: &ModelSpec) -> Result<Accuracy> {
    evaluate_accuracy(&vec![model; shards.len()], shards, spec)
}

/// One CSV row; column order is part of the output format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub client_id: usize,
    pub compute_s: f64,
    pub idle_s: f64,
    pub comm_s: f64,
    pub batch_size: usize,
    pub acc_overall: Option<f64>,
    pub acc_client: Option<f64>,
}

pub const CSV_HEADER: &str = "round,client_id,compute_s,idle_s,comm_s,batch_size,acc_overall,acc_client";

pub fn to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    if rows.is_empty() {
        return Ok(format!("{CSV_HEADER}\n"));
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
