//! Drives experiments from a config: builds the dataset, partitions, and
//! simulation; runs the rounds; writes manifests, round logs, and model
//! checkpoints; and runs multi-algorithm comparison sweeps over identical
//! data and initializations.

use std::path::{Path, PathBuf};

use crate::baselines::AlgorithmKind;
use crate::config::{ExperimentConfig, RunManifest};
use crate::data::{partition_noniid, PartitionPlan};
use crate::error::{Error, Result};
use crate::metrics::{csv_string, RoundRecord, TargetHit, TargetTracker};
use crate::models::ModelCheckpoint;
use crate::protocol::Simulation;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FEDSSA_OUTPUT_DIR";

/// Builds a ready-to-run simulation from a validated config.
pub fn build_simulation(config: &ExperimentConfig) -> Result<Simulation> {
    let params = config.sim_params()?;
    let dataset = config.build_dataset()?;
    let plan = PartitionPlan {
        num_clients: config.n,
        classes_per_client: config.classes_per_client,
        seed: params.seeds.partition(),
    };
    let set = partition_noniid(&dataset, &plan)?;
    let zoo = config.extractor_specs(dataset.input_dim());
    Simulation::new(params, dataset, set.partitions, set.dropped_samples, &zoo)
}

/// The in-memory result of a full run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    /// Accuracy of the untrained initial models (round records hold the
    /// post-round accuracies).
    pub initial_accuracy: Vec<Option<f64>>,
    pub initial_mean: Option<f64>,
    pub records: Vec<RoundRecord>,
    pub target: Option<TargetHit>,
    /// Final simulator state, including every client's personalized model.
    pub sim: Simulation,
}

impl ExperimentResult {
    pub fn final_mean_accuracy(&self) -> Option<f64> {
        self.records.last().map_or(self.initial_mean, |r| r.mean_accuracy)
    }
}

/// Runs the experiment entirely in memory. With `t = 0` only the initial
/// models are evaluated.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let mut sim = build_simulation(config)?;
    let (initial_accuracy, initial_mean) = sim.evaluate_all()?;
    let mut tracker = config.target_accuracy.map(TargetTracker::new);
    let records = sim.run_all(|record| {
        if let Some(tr) = tracker.as_mut() {
            tr.observe(record);
        }
        Ok(())
    })?;
    Ok(ExperimentResult {
        initial_accuracy,
        initial_mean,
        records,
        target: tracker.and_then(|t| t.hit),
        sim,
    })
}

/// Summary of a completed, file-backed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub final_mean_accuracy: Option<f64>,
    pub cumulative_params: u64,
    pub cumulative_flops: u64,
    pub target: Option<TargetHit>,
    pub rounds_csv: PathBuf,
    pub manifest_path: PathBuf,
    pub models_path: PathBuf,
}

impl RunSummary {
    /// One-line human summary.
    pub fn line(&self) -> String {
        format!(
            "{}: final mean accuracy {}, cumulative params {}, cumulative flops {}",
            self.run_id,
            self.final_mean_accuracy.map_or_else(|| "undefined".to_string(), |a| format!("{a:.4}")),
            self.cumulative_params,
            self.cumulative_flops
        )
    }
}

fn effective_output_dir(config: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config.output_dir.clone(),
    }
}

/// Runs an experiment and writes the manifest (incomplete first, finalized
/// at the end), the round CSV, per-round warnings to stderr, optional
/// simulator-state checkpoints, and the final model checkpoint.
pub fn run_to_files(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let out_dir = effective_output_dir(config);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let run_id = config.effective_run_id();
    let manifest_path = out_dir.join(format!("{run_id}_manifest.json"));
    let rounds_csv = out_dir.join(format!("{run_id}_rounds.csv"));
    let models_path = out_dir.join(format!("{run_id}_models.json"));

    // The manifest lands before any compute so an interrupted run is
    // visible as incomplete.
    let mut manifest = RunManifest::new(config.clone());
    manifest.write(&manifest_path)?;

    let mut sim = build_simulation(config)?;
    let mut tracker = config.target_accuracy.map(TargetTracker::new);
    let mut records: Vec<RoundRecord> = Vec::with_capacity(config.t);
    for t in 0..config.t {
        let record = sim.run_round(t)?;
        for warning in &record.warnings {
            eprintln!("warning: {warning}");
        }
        if let Some(tr) = tracker.as_mut() {
            tr.observe(&record);
        }
        if let Some(every) = config.checkpoint_every {
            if (t + 1) % every == 0 {
                let path = out_dir.join(format!("{run_id}_state_round{t}.json"));
                let json = serde_json::to_string(&sim)?;
                std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            }
        }
        records.push(record);
    }

    std::fs::write(&rounds_csv, csv_string(&records)).map_err(|e| Error::io(&rounds_csv, e))?;
    write_models(&sim, &models_path)?;

    manifest.complete();
    manifest.write(&manifest_path)?;

    Ok(RunSummary {
        run_id,
        final_mean_accuracy: records.last().and_then(|r| r.mean_accuracy),
        cumulative_params: sim.cumulative_params(),
        cumulative_flops: sim.cumulative_flops(),
        target: tracker.and_then(|t| t.hit),
        rounds_csv,
        manifest_path,
        models_path,
    })
}

/// All final client models in one checkpoint document, keyed
/// `client<k>.<array>`.
fn write_models(sim: &Simulation, path: &Path) -> Result<()> {
    let mut arrays = std::collections::BTreeMap::new();
    for client in &sim.clients {
        let doc = ModelCheckpoint::from_model(&client.model);
        for (name, array) in doc.arrays {
            arrays.insert(format!("client{}.{name}", client.id), array);
        }
    }
    let doc = ModelCheckpoint { arrays };
    let json = serde_json::to_string(&doc)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// One row of a comparison summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompareRow {
    pub algorithm: String,
    pub final_mean_accuracy: Option<f64>,
    pub rounds_to_target: Option<usize>,
    pub params_to_target: Option<u64>,
    pub flops_to_target: Option<u64>,
}

pub const COMPARE_CSV_HEADER: &str =
    "algorithm,final_mean_accuracy,rounds_to_target,params_to_target,flops_to_target";

/// Runs the same experiment under several algorithms. All runs share the
/// data, partition, and model-init streams (those derive from the master
/// seed only), so the comparison is apples to apples. Returns the summary
/// rows and writes `<prefix>compare_summary.csv`.
pub fn compare(base: &ExperimentConfig, algorithms: &[AlgorithmKind]) -> Result<Vec<CompareRow>> {
    if algorithms.is_empty() {
        return Err(Error::config("algorithms", "need at least one algorithm"));
    }
    let mut configs = Vec::with_capacity(algorithms.len());
    for &algorithm in algorithms {
        let mut cfg = base.clone();
        cfg.algorithm = algorithm;
        cfg.run_id = Some(format!("{}_s{}", algorithm.as_str(), cfg.seed));
        configs.push(cfg);
    }
    compare_configs(&configs)
}

/// As [`compare`], from explicit per-algorithm configs. Configs differing
/// in anything but `algorithm`/`algo_params` are refused.
pub fn compare_configs(configs: &[ExperimentConfig]) -> Result<Vec<CompareRow>> {
    let first = configs.first().ok_or_else(|| Error::config("configs", "empty comparison"))?;
    let fingerprint = first.fairness_fingerprint();
    for cfg in configs {
        if cfg.fairness_fingerprint() != fingerprint {
            return Err(Error::config(
                "configs",
                "comparison configs may differ only in algorithm and algo_params",
            ));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let summary = run_to_files(cfg)?;
        rows.push(CompareRow {
            algorithm: cfg.algorithm.as_str().to_string(),
            final_mean_accuracy: summary.final_mean_accuracy,
            rounds_to_target: summary.target.map(|h| h.round),
            params_to_target: summary.target.map(|h| h.cum_params),
            flops_to_target: summary.target.map(|h| h.cum_flops),
        });
    }
    let out_dir = effective_output_dir(first);
    let path = out_dir.join("compare_summary.csv");
    std::fs::write(&path, compare_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Renders comparison rows as CSV.
pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(COMPARE_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.algorithm,
            row.final_mean_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            row.rounds_to_target.map(|v| v.to_string()).unwrap_or_default(),
            row.params_to_target.map(|v| v.to_string()).unwrap_or_default(),
            row.flops_to_target.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    out
}

/// Writes a small hand-crafted IDX fixture pair (four 2x2 images with known
/// bytes) plus a sample config, for demos and format tests.
pub fn gen_fixtures(dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images_path = dir.join("fixture-images-idx3-ubyte");
    let labels_path = dir.join("fixture-labels-idx1-ubyte");
    let config_path = dir.join("fixture-config.json");

    let mut images: Vec<u8> = Vec::new();
    images.extend_from_slice(&crate::data::IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&4u32.to_be_bytes());
    images.extend_from_slice(&2u32.to_be_bytes());
    images.extend_from_slice(&2u32.to_be_bytes());
    images.extend_from_slice(&[0, 255, 128, 64, 1, 2, 3, 4, 10, 20, 30, 40, 200, 100, 50, 25]);
    std::fs::write(&images_path, images).map_err(|e| Error::io(&images_path, e))?;

    let mut labels: Vec<u8> = Vec::new();
    labels.extend_from_slice(&crate::data::IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&4u32.to_be_bytes());
    labels.extend_from_slice(&[7, 0, 9, 3]);
    std::fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;

    let config = serde_json::json!({
        "dataset": {"kind": "blobs", "per_class_n": 200, "d_in": 32, "spread": 0.5},
        "s": 10,
        "n": 10,
        "c": 1.0,
        "t": 50,
        "e": 1,
        "b": 8,
        "eta": 0.01,
        "classes_per_client": 2,
        "algorithm": "fedssa",
        "algo_params": {"mu0": 0.5, "t_stable": 25, "lambda": 1.0, "fusion": "paper"},
        "seed": 42,
        "output_dir": "runs"
    });
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)?)
        .map_err(|e| Error::io(&config_path, e))?;
    Ok(vec![images_path, labels_path, config_path])
}
