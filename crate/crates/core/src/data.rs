//! Labeled datasets and their distribution across clients: synthetic
//! Gaussian-blob classification data, IDX-format digit images, class-skewed
//! (non-IID) partitioning, and seeded mini-batch iteration.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::numerics::{Batch, Matrix};
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled classification dataset: one feature row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::index(format!("label {bad} with {num_classes} classes")));
        }
        Ok(LabeledDataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Materializes the samples at `indices` into a batch.
    pub fn batch_from_indices(&self, indices: &[usize]) -> Result<Batch> {
        let mut rows = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::index(format!("sample {i} of {}", self.len())));
            }
            rows.push(self.features.row(i).to_vec());
            labels.push(self.labels[i]);
        }
        let inputs = if rows.is_empty() {
            Matrix::zeros(0, self.input_dim())
        } else {
            Matrix::from_rows(&rows)?
        };
        Batch::new(inputs, labels)
    }
}

/// How to scatter a dataset across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub seed: u64,
}

/// One client's slice of the dataset: disjoint train/eval/test index lists
/// plus the set of classes the client holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPartition {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub test: Vec<usize>,
    pub seen: BTreeSet<usize>,
}

impl DataPartition {
    pub fn total_len(&self) -> usize {
        self.train.len() + self.eval.len() + self.test.len()
    }
}

/// Result of partitioning: per-client partitions plus the number of samples
/// that were dropped because their class was assigned to no client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSet {
    pub partitions: Vec<DataPartition>,
    pub dropped_samples: usize,
}

/// Generates `num_classes` Gaussian clusters with distinct means (uniform in
/// `[-1, 1]^input_dim`) and isotropic noise of scale `spread`. Samples are
/// laid out class-major and the whole construction is deterministic in
/// `seed`.
pub fn gen_blobs(
    num_classes: usize,
    per_class_n: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::config("s", "need at least 2 classes"));
    }
    if per_class_n < 10 {
        return Err(Error::config("dataset.per_class_n", "need at least 10 samples per class"));
    }
    if input_dim == 0 {
        return Err(Error::config("dataset.d_in", "must be > 0"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::config("dataset.spread", "must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let n = num_classes * per_class_n;
    let mut features = Matrix::zeros(n, input_dim);
    let mut labels = Vec::with_capacity(n);
    let normal = StandardNormal;
    for (class, mean) in means.iter().enumerate() {
        for i in 0..per_class_n {
            let row = features.row_mut(class * per_class_n + i);
            for (v, m) in row.iter_mut().zip(mean) {
                let noise: f64 = normal.sample(&mut rng);
                *v = m + spread * noise;
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, num_classes)
}

/// Loads an IDX image/label file pair (big-endian, unsigned bytes). Pixels
/// are scaled to `[0, 1]` by `1/255`; labels must lie in `[0, 10)`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes =
        std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes =
        std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let idx_err = |path: &Path, kind: IdxError| Error::Idx { path: path.to_path_buf(), kind };

    let mut cur = std::io::Cursor::new(&image_bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| idx_err(images_path, IdxError::Truncated { expected: 16, found: image_bytes.len() }))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(images_path, IdxError::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic }));
    }
    let read_dim = |cur: &mut std::io::Cursor<&Vec<u8>>| {
        cur.read_u32::<BigEndian>().map_err(|_| {
            idx_err(images_path, IdxError::Truncated { expected: 16, found: image_bytes.len() })
        })
    };
    let n_images = read_dim(&mut cur)? as usize;
    let rows = read_dim(&mut cur)? as usize;
    let cols = read_dim(&mut cur)? as usize;
    let pixel_count = n_images * rows * cols;
    let payload = image_bytes.len() - 16;
    if payload < pixel_count {
        return Err(idx_err(images_path, IdxError::Truncated { expected: pixel_count, found: payload }));
    }
    if payload > pixel_count {
        return Err(idx_err(images_path, IdxError::TrailingData { expected: pixel_count, found: payload }));
    }
    let mut pixels = vec![0u8; pixel_count];
    cur.read_exact(&mut pixels)
        .map_err(|_| idx_err(images_path, IdxError::Truncated { expected: pixel_count, found: payload }))?;

    let mut cur = std::io::Cursor::new(&label_bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| idx_err(labels_path, IdxError::Truncated { expected: 8, found: label_bytes.len() }))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(labels_path, IdxError::BadMagic { expected: IDX_LABELS_MAGIC, found: magic }));
    }
    let n_labels = cur.read_u32::<BigEndian>().map_err(|_| {
        idx_err(labels_path, IdxError::Truncated { expected: 8, found: label_bytes.len() })
    })? as usize;
    let label_payload = label_bytes.len() - 8;
    if label_payload < n_labels {
        return Err(idx_err(labels_path, IdxError::Truncated { expected: n_labels, found: label_payload }));
    }
    if label_payload > n_labels {
        return Err(idx_err(labels_path, IdxError::TrailingData { expected: n_labels, found: label_payload }));
    }
    let mut raw_labels = vec![0u8; n_labels];
    cur.read_exact(&mut raw_labels)
        .map_err(|_| idx_err(labels_path, IdxError::Truncated { expected: n_labels, found: label_payload }))?;

    if n_images != n_labels {
        return Err(idx_err(images_path, IdxError::CountMismatch { images: n_images, labels: n_labels }));
    }

    const NUM_CLASSES: usize = 10;
    let mut labels = Vec::with_capacity(n_labels);
    for &l in &raw_labels {
        if l as usize >= NUM_CLASSES {
            return Err(idx_err(
                labels_path,
                IdxError::LabelOutOfRange { label: l, num_classes: NUM_CLASSES },
            ));
        }
        labels.push(l as usize);
    }

    let d_in = rows * cols;
    let mut features = Matrix::zeros(n_images, d_in);
    for (i, chunk) in pixels.chunks(d_in).enumerate() {
        for (v, &p) in features.row_mut(i).iter_mut().zip(chunk) {
            *v = p as f64 / 255.0;
        }
    }
    LabeledDataset::new(features, labels, NUM_CLASSES)
}

/// Assigns each client exactly `classes_per_client` classes by dealing a
/// seeded shuffle of the class list round-robin, then divides every class's
/// samples evenly (within one) among its holders and splits each client's
/// samples 8:1:1 (eval and test take `floor(n/10)` per class, train the
/// remainder, stratified by class).
///
/// Classes held by no client (possible only when `N * classes_per_client <
/// S`) have all their samples dropped; the count is reported.
pub fn partition_noniid(ds: &LabeledDataset, plan: &PartitionPlan) -> Result<PartitionSet> {
    let s = ds.num_classes;
    if plan.num_clients == 0 {
        return Err(Error::config("n", "need at least one client"));
    }
    if plan.classes_per_client == 0 || plan.classes_per_client > s {
        return Err(Error::config(
            "classes_per_client",
            format!("must be in [1, {s}]"),
        ));
    }

    // Deal classes: slot i of the client-major slot sequence gets the
    // shuffled class at position i mod S.
    let mut class_order: Vec<usize> = (0..s).collect();
    let mut assign_rng = ChaCha8Rng::seed_from_u64(seed::derive(plan.seed, &[1]));
    class_order.shuffle(&mut assign_rng);

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); s];
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); plan.num_clients];
    for (client, seen_set) in seen.iter_mut().enumerate() {
        for j in 0..plan.classes_per_client {
            let slot = client * plan.classes_per_client + j;
            let class = class_order[slot % s];
            holders[class].push(client);
            seen_set.insert(class);
        }
    }

    // Samples of each class, in dataset order.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); s];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }

    let mut per_client_class: Vec<Vec<(usize, Vec<usize>)>> =
        vec![Vec::new(); plan.num_clients];
    let mut dropped = 0usize;
    for class in 0..s {
        let class_holders = &holders[class];
        if class_holders.is_empty() {
            dropped += by_class[class].len();
            continue;
        }
        let mut idxs = by_class[class].clone();
        if idxs.len() < class_holders.len() {
            return Err(Error::config(
                "classes_per_client",
                format!(
                    "class {class} has {} samples for {} holders; a holder would get none",
                    idxs.len(),
                    class_holders.len()
                ),
            ));
        }
        let mut class_rng = ChaCha8Rng::seed_from_u64(seed::derive(plan.seed, &[2, class as u64]));
        idxs.shuffle(&mut class_rng);
        // Even chunks, sizes within one of each other: the first n % h
        // holders get one extra.
        let h = class_holders.len();
        let base = idxs.len() / h;
        let extra = idxs.len() % h;
        let mut offset = 0;
        for (j, &client) in class_holders.iter().enumerate() {
            let take = base + usize::from(j < extra);
            let chunk = idxs[offset..offset + take].to_vec();
            offset += take;
            per_client_class[client].push((class, chunk));
        }
    }

    let mut partitions = Vec::with_capacity(plan.num_clients);
    for (client, classes) in per_client_class.into_iter().enumerate() {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        let mut test = Vec::new();
        for (_, chunk) in &classes {
            let tenth = chunk.len() / 10;
            eval.extend_from_slice(&chunk[..tenth]);
            test.extend_from_slice(&chunk[tenth..2 * tenth]);
            train.extend_from_slice(&chunk[2 * tenth..]);
        }
        train.sort_unstable();
        eval.sort_unstable();
        test.sort_unstable();
        partitions.push(DataPartition {
            client_id: client,
            train,
            eval,
            test,
            seen: seen[client].clone(),
        });
    }
    Ok(PartitionSet { partitions, dropped_samples: dropped })
}

/// Splits `indices` into mini-batches of `batch_size` after a seeded
/// shuffle; the last batch may be short. The union of the batches is exactly
/// the index set.
pub fn batches(
    ds: &LabeledDataset,
    indices: &[usize],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("b", "batch size must be >= 1"));
    }
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| ds.batch_from_indices(chunk))
        .collect()
}
