//! Reference algorithms sharing the round engine: independent local
//! training, homogeneous FedAvg, full-header and seen-class header
//! replacement (the two fusion ablations), and a simplified class-prototype
//! exchange.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{ClassificationHeader, HeaderRow, LocalModel};
use crate::numerics::DenseLayer;
use crate::protocol::{fuse_header, FusionMode};

/// Which algorithm drives a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    /// No communication; lower performance bound.
    Standalone,
    /// Classic full-model weighted averaging; needs a single-spec zoo.
    FedavgHomo,
    /// Ablation A: replace the whole local header with the global header.
    CaseAReplace,
    /// Ablation B: replace only the seen-class rows.
    CaseBSeenReplace,
    /// Class-prototype exchange with a squared-distance regularizer.
    FedprotoLite,
    /// Full class-wise aggregation plus adaptive stabilization fusion.
    Fedssa,
}

impl AlgorithmKind {
    pub const ALL: &'static [AlgorithmKind] = &[
        AlgorithmKind::Standalone,
        AlgorithmKind::FedavgHomo,
        AlgorithmKind::CaseAReplace,
        AlgorithmKind::CaseBSeenReplace,
        AlgorithmKind::FedprotoLite,
        AlgorithmKind::Fedssa,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AlgorithmKind::Standalone => "standalone",
            AlgorithmKind::FedavgHomo => "fedavg_homo",
            AlgorithmKind::CaseAReplace => "case_a_replace",
            AlgorithmKind::CaseBSeenReplace => "case_b_seen_replace",
            AlgorithmKind::FedprotoLite => "fedproto_lite",
            AlgorithmKind::Fedssa => "fedssa",
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standalone" => Ok(AlgorithmKind::Standalone),
            "fedavg_homo" | "fedavg" => Ok(AlgorithmKind::FedavgHomo),
            "case_a_replace" | "case_a" => Ok(AlgorithmKind::CaseAReplace),
            "case_b_seen_replace" | "case_b" => Ok(AlgorithmKind::CaseBSeenReplace),
            "fedproto_lite" | "fedproto" => Ok(AlgorithmKind::FedprotoLite),
            "fedssa" => Ok(AlgorithmKind::Fedssa),
            other => Err(Error::config("algorithm", format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Ablation A: the client adopts the global header wholesale (all classes).
pub fn case_a_replace(
    local: &ClassificationHeader,
    global: &ClassificationHeader,
) -> Result<ClassificationHeader> {
    if local.num_classes() != global.num_classes() || local.d_rep() != global.d_rep() {
        return Err(Error::dim(format!(
            "header shapes differ: {}x{} vs {}x{}",
            local.num_classes(),
            local.d_rep(),
            global.num_classes(),
            global.d_rep()
        )));
    }
    Ok(global.clone())
}

/// Ablation B: replace exactly the seen-class rows with the global rows.
/// Identical, bit for bit, to fusion at `mu = 0`.
pub fn case_b_seen_replace(
    local: &ClassificationHeader,
    global_rows: &BTreeMap<usize, HeaderRow>,
    seen: &std::collections::BTreeSet<usize>,
) -> Result<ClassificationHeader> {
    fuse_header(local, global_rows, seen, 0.0, FusionMode::Paper)
}

/// Per-class mean representations with the sample counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub vectors: BTreeMap<usize, Vec<f64>>,
    pub counts: BTreeMap<usize, usize>,
}

/// Mean representation per class over the samples at `indices`.
pub fn compute_prototypes(
    model: &LocalModel,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<PrototypeSet> {
    let d_rep = model.d_rep();
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for chunk in indices.chunks(512) {
        let batch = ds.batch_from_indices(chunk)?;
        if batch.is_empty() {
            continue;
        }
        let (rep, _) = model.forward(&batch.inputs)?;
        for (i, &y) in batch.labels.iter().enumerate() {
            let sum = sums.entry(y).or_insert_with(|| vec![0.0; d_rep]);
            for (acc, v) in sum.iter_mut().zip(rep.row(i)) {
                *acc += v;
            }
            *counts.entry(y).or_insert(0) += 1;
        }
    }
    let vectors = sums
        .into_iter()
        .map(|(y, sum)| {
            let n = counts[&y] as f64;
            (y, sum.into_iter().map(|v| v / n).collect())
        })
        .collect();
    Ok(PrototypeSet { vectors, counts })
}

/// Server-side prototype aggregation: unweighted per-class mean over the
/// uploading clients, summed in ascending client-id order. Classes nobody
/// uploaded carry over from `prev`.
pub fn aggregate_prototypes(
    uploads: &[(usize, PrototypeSet)],
    prev: &BTreeMap<usize, Vec<f64>>,
    d_rep: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut order: Vec<&(usize, PrototypeSet)> = uploads.iter().collect();
    order.sort_by_key(|(client, _)| *client);
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (client, pset) in &order {
        for (&class, vector) in &pset.vectors {
            if vector.len() != d_rep {
                return Err(Error::protocol(format!(
                    "client {client} uploaded prototype of width {} for class {class}, expected {d_rep}",
                    vector.len()
                )));
            }
            let (sum, count) = sums.entry(class).or_insert_with(|| (vec![0.0; d_rep], 0));
            for (acc, v) in sum.iter_mut().zip(vector) {
                *acc += v;
            }
            *count += 1;
        }
    }
    let mut merged = prev.clone();
    for (class, (sum, count)) in sums {
        let inv = count as f64;
        merged.insert(class, sum.into_iter().map(|v| v / inv).collect());
    }
    Ok(merged)
}

/// Sample-count-weighted mean of structurally identical models, summed in
/// ascending client-id order: `(client_id, n_k, model)` triples.
pub fn fedavg_aggregate(contributions: &[(usize, usize, LocalModel)]) -> Result<LocalModel> {
    if contributions.is_empty() {
        return Err(Error::protocol("fedavg aggregation over zero models"));
    }
    let mut order: Vec<&(usize, usize, LocalModel)> = contributions.iter().collect();
    order.sort_by_key(|(client, _, _)| *client);
    let total: usize = order.iter().map(|(_, n, _)| n).sum();
    if total == 0 {
        return Err(Error::protocol("fedavg aggregation with zero total samples"));
    }

    let template = &order[0].2;
    let mut acc_extractor: Vec<(Vec<f64>, Vec<f64>)> = template
        .extractor
        .iter()
        .map(|l| (vec![0.0; l.weight.data().len()], vec![0.0; l.bias.len()]))
        .collect();
    let mut acc_header_w = vec![0.0; template.header.weight().data().len()];
    let mut acc_header_b = vec![0.0; template.header.bias().len()];

    for (client, n, model) in &order {
        if model.extractor.len() != template.extractor.len()
            || model.header.num_classes() != template.header.num_classes()
            || model.header.d_rep() != template.header.d_rep()
        {
            return Err(Error::dim(format!("client {client} model shape differs")));
        }
        let w = *n as f64 / total as f64;
        for ((acc_w, acc_b), layer) in acc_extractor.iter_mut().zip(&model.extractor) {
            if acc_w.len() != layer.weight.data().len() {
                return Err(Error::dim(format!("client {client} layer shape differs")));
            }
            for (a, v) in acc_w.iter_mut().zip(layer.weight.data()) {
                *a += w * v;
            }
            for (a, v) in acc_b.iter_mut().zip(&layer.bias) {
                *a += w * v;
            }
        }
        for (a, v) in acc_header_w.iter_mut().zip(model.header.weight().data()) {
            *a += w * v;
        }
        for (a, v) in acc_header_b.iter_mut().zip(model.header.bias()) {
            *a += w * v;
        }
    }

    let extractor: Vec<DenseLayer> = acc_extractor
        .into_iter()
        .zip(&template.extractor)
        .map(|((w, b), layer)| {
            let weight = crate::numerics::Matrix::from_vec(
                layer.weight.rows(),
                layer.weight.cols(),
                w,
            )?;
            DenseLayer::new(weight, b)
        })
        .collect::<Result<_>>()?;
    let header_weight = crate::numerics::Matrix::from_vec(
        template.header.num_classes(),
        template.header.d_rep(),
        acc_header_w,
    )?;
    let header = ClassificationHeader::new(header_weight, acc_header_b)?;
    Ok(LocalModel { extractor, header })
}
