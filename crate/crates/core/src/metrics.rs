//! Accuracy evaluation, communication and computation accounting,
//! target-accuracy tracking, and round-record emission (CSV/JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::LocalModel;

/// Everything measured in one round. `client_accuracy[k]` is client `k`'s
/// test accuracy (`None` when the client's test split is empty, excluded
/// from the mean). `mean_train_loss` and `warnings` are diagnostics carried
/// alongside the emitted schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_accuracy: Vec<Option<f64>>,
    pub mean_accuracy: Option<f64>,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub cum_params: u64,
    pub flops: u64,
    pub cum_flops: u64,
    pub wall_ms: u64,
    pub mean_train_loss: Option<f64>,
    pub warnings: Vec<String>,
}

/// Accuracy of `model` on the samples at `indices`: fraction of
/// argmax-correct predictions (first maximum wins ties). Empty index sets
/// have no defined accuracy.
pub fn evaluate_model(
    model: &LocalModel,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<Option<f64>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    // Bounded chunks keep the forward-pass scratch small.
    for chunk in indices.chunks(512) {
        let batch = ds.batch_from_indices(chunk)?;
        let (_, logits) = model.forward(&batch.inputs)?;
        for (i, &label) in batch.labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(Some(correct as f64 / indices.len() as f64))
}

/// Unweighted mean over the clients with a defined accuracy.
pub fn mean_accuracy(accuracies: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = accuracies.iter().filter_map(|a| *a).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopMode {
    Train,
    Infer,
}

/// FLOP estimate for passing `n_samples` through `model` for `epochs`
/// epochs. Convention: a dense layer forward costs `2 * in * out` per
/// sample; training costs 3x forward (backward counted as two forwards).
pub fn flops_estimate(model: &LocalModel, n_samples: usize, epochs: usize, mode: FlopMode) -> u64 {
    let mut per_sample: u64 = 0;
    for layer in &model.extractor {
        per_sample += 2 * layer.in_dim() as u64 * layer.out_dim() as u64;
    }
    per_sample += 2 * model.d_rep() as u64 * model.num_classes() as u64;
    let factor = match mode {
        FlopMode::Train => 3,
        FlopMode::Infer => 1,
    };
    per_sample * n_samples as u64 * epochs as u64 * factor
}

/// FLOP cost of fusing `rows` header rows of width `d_rep`: 2 per scalar
/// (one multiply, one add), biases included. Applied uniformly to every
/// header-update rule so that equivalent rules account identically.
pub fn fusion_flops(rows: usize, d_rep: usize) -> u64 {
    2 * rows as u64 * (d_rep as u64 + 1)
}

/// Tracks the first round at which the mean accuracy reaches a target.
/// Latches exactly once and never un-latches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTracker {
    pub target: f64,
    pub hit: Option<TargetHit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetHit {
    pub round: usize,
    pub cum_params: u64,
    pub cum_flops: u64,
}

impl TargetTracker {
    pub fn new(target: f64) -> Self {
        TargetTracker { target, hit: None }
    }

    pub fn observe(&mut self, record: &RoundRecord) {
        if self.hit.is_none() {
            if let Some(acc) = record.mean_accuracy {
                if acc >= self.target {
                    self.hit = Some(TargetHit {
                        round: record.round,
                        cum_params: record.cum_params,
                        cum_flops: record.cum_flops,
                    });
                }
            }
        }
    }
}

/// Exact emitted CSV header.
pub const CSV_HEADER: &str =
    "round,client_id,accuracy,mean_accuracy,uplink_params,downlink_params,cum_params,flops,cum_flops,wall_ms";

/// One emitted row: per (round, client), plus a per-round mean row with
/// `client_id = -1` whose `accuracy` equals the round mean. Round-level
/// fields repeat on every row of the round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitRow {
    pub round: usize,
    pub client_id: i64,
    pub accuracy: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub cum_params: u64,
    pub flops: u64,
    pub cum_flops: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
}

/// Flattens records to the emitted row schema.
pub fn emit_rows(records: &[RoundRecord]) -> Vec<EmitRow> {
    let mut rows = Vec::new();
    for rec in records {
        let base = EmitRow {
            round: rec.round,
            client_id: -1,
            accuracy: rec.mean_accuracy,
            mean_accuracy: rec.mean_accuracy,
            uplink_params: rec.uplink_params,
            downlink_params: rec.downlink_params,
            cum_params: rec.cum_params,
            flops: rec.flops,
            cum_flops: rec.cum_flops,
            wall_ms: rec.wall_ms,
        };
        for (k, acc) in rec.client_accuracy.iter().enumerate() {
            rows.push(EmitRow { client_id: k as i64, accuracy: *acc, ..base.clone() });
        }
        rows.push(base);
    }
    rows
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders the CSV document (no quoting needed: no field can contain a
/// comma). Byte-stable for identical records.
pub fn csv_string(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in emit_rows(records) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.round,
            row.client_id,
            fmt_opt(row.accuracy),
            fmt_opt(row.mean_accuracy),
            row.uplink_params,
            row.downlink_params,
            row.cum_params,
            row.flops,
            row.cum_flops,
            row.wall_ms
        ));
    }
    out
}

/// JSON mirror of the CSV rows.
pub fn json_string(records: &[RoundRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&emit_rows(records))?)
}

/// Writes the round log to `path` in the chosen format.
pub fn emit(records: &[RoundRecord], path: &Path, format: EmitFormat) -> Result<()> {
    let payload = match format {
        EmitFormat::Csv => csv_string(records),
        EmitFormat::Json => json_string(records)?,
    };
    std::fs::write(path, payload).map_err(|e| Error::io(path, e))
}
