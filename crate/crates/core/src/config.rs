//! Experiment configuration: a single JSON document with defaults for every
//! optional key, `--key value` overrides with dotted paths for nested keys,
//! full validation up front, and the run manifest that makes a run
//! reproducible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::AlgorithmKind;
use crate::data::{gen_blobs, load_idx, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::ExtractorSpec;
use crate::protocol::{FusionMode, SimParams, StabilizationSchedule};
use crate::seed::SeedStreams;

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic Gaussian clusters.
    Blobs {
        #[serde(default = "default_per_class_n")]
        per_class_n: usize,
        #[serde(default = "default_d_in")]
        d_in: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// IDX image/label file pair (ten classes).
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_per_class_n() -> usize {
    200
}

fn default_d_in() -> usize {
    32
}

fn default_spread() -> f64 {
    0.5
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Blobs {
            per_class_n: default_per_class_n(),
            d_in: default_d_in(),
            spread: default_spread(),
        }
    }
}

/// One zoo entry; `input_dim` comes from the dataset at build time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooSpec {
    pub hidden: Vec<usize>,
    pub d_rep: usize,
}

/// Algorithm hyperparameters; unused keys are ignored by algorithms that do
/// not consume them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoParams {
    /// Initial stabilization coefficient (0 disables stabilization).
    #[serde(default = "default_mu0")]
    pub mu0: f64,
    /// Rounds of stabilization before pure replacement.
    #[serde(default = "default_t_stable")]
    pub t_stable: usize,
    /// Prototype regularizer strength.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Seen-class fusion rule.
    #[serde(default)]
    pub fusion: FusionMode,
}

fn default_mu0() -> f64 {
    0.5
}

fn default_t_stable() -> usize {
    25
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for AlgoParams {
    fn default() -> Self {
        AlgoParams {
            mu0: default_mu0(),
            t_stable: default_t_stable(),
            lambda: default_lambda(),
            fusion: FusionMode::default(),
        }
    }
}

/// The complete experiment description. Every optional key has a default;
/// see the README for the key reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    /// Class count (blobs only; IDX data is always ten classes).
    #[serde(default = "default_s")]
    pub s: usize,
    /// Number of clients.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Participation fraction per round.
    #[serde(default = "default_c")]
    pub c: f64,
    /// Rounds.
    #[serde(default = "default_t")]
    pub t: usize,
    /// Local epochs per round.
    #[serde(default = "default_e")]
    pub e: usize,
    /// Mini-batch size.
    #[serde(default = "default_b")]
    pub b: usize,
    /// SGD learning rate.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Classes per client in the non-IID assignment.
    #[serde(default = "default_classes_per_client")]
    pub classes_per_client: usize,
    /// Extractor zoo; empty means the built-in five-spec zoo.
    #[serde(default)]
    pub zoo: Vec<ZooSpec>,
    #[serde(default = "default_algorithm")]
    pub algorithm: AlgorithmKind,
    #[serde(default)]
    pub algo_params: AlgoParams,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Mean accuracy at which the to-target counters latch.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Serialize the full simulator state every k rounds.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Record real per-round wall time in the round log. Off by default so
    /// that identical (config, seed) runs produce byte-identical outputs.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Run client updates in parallel (bit-identical to sequential).
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Output file prefix; defaults to `<algorithm>_s<seed>`.
    #[serde(default)]
    pub run_id: Option<String>,
}

fn default_s() -> usize {
    10
}

fn default_n() -> usize {
    10
}

fn default_c() -> f64 {
    1.0
}

fn default_t() -> usize {
    50
}

fn default_e() -> usize {
    1
}

fn default_b() -> usize {
    8
}

fn default_eta() -> f64 {
    0.01
}

fn default_classes_per_client() -> usize {
    2
}

fn default_algorithm() -> AlgorithmKind {
    AlgorithmKind::Fedssa
}

fn default_seed() -> u64 {
    42
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

/// Default zoo hidden layer shapes (five structurally different extractors).
pub const DEFAULT_ZOO_HIDDEN: [&[usize]; 5] = [&[128, 96], &[128], &[96], &[80], &[48]];

pub const DEFAULT_D_REP: usize = 64;

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_value(serde_json::json!({})).expect("empty config is valid")
    }
}

impl ExperimentConfig {
    /// Checks every constraint the simulator relies on, naming the
    /// offending key.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Blobs { per_class_n, d_in, spread } => {
                if *per_class_n < 10 {
                    return Err(Error::config("dataset.per_class_n", "must be >= 10"));
                }
                if *d_in == 0 {
                    return Err(Error::config("dataset.d_in", "must be > 0"));
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(Error::config("dataset.spread", "must be finite and >= 0"));
                }
                if self.s < 2 {
                    return Err(Error::config("s", "need at least 2 classes"));
                }
            }
            DatasetConfig::Idx { .. } => {
                if self.s != 10 {
                    return Err(Error::config("s", "idx datasets always have 10 classes"));
                }
            }
        }
        if self.n == 0 {
            return Err(Error::config("n", "need at least one client"));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::config("c", "must be in (0, 1]"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be > 0"));
        }
        if self.b == 0 {
            return Err(Error::config("b", "must be >= 1"));
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.s {
            return Err(Error::config("classes_per_client", format!("must be in [1, {}]", self.s)));
        }
        if !(0.0..=1.0).contains(&self.algo_params.mu0) {
            return Err(Error::config("algo_params.mu0", "must be in [0, 1]"));
        }
        if !(self.algo_params.lambda >= 0.0 && self.algo_params.lambda.is_finite()) {
            return Err(Error::config("algo_params.lambda", "must be >= 0"));
        }
        if let Some(target) = self.target_accuracy {
            if !(0.0..=1.0).contains(&target) {
                return Err(Error::config("target_accuracy", "must be in [0, 1]"));
            }
        }
        if let Some(k) = self.checkpoint_every {
            if k == 0 {
                return Err(Error::config("checkpoint_every", "must be >= 1 when set"));
            }
        }
        let zoo = &self.zoo;
        if !zoo.is_empty() {
            let d_rep = zoo[0].d_rep;
            for (i, spec) in zoo.iter().enumerate() {
                if spec.d_rep != d_rep {
                    return Err(Error::config(
                        "zoo",
                        format!("spec {i} has d_rep {} but spec 0 has {d_rep}", spec.d_rep),
                    ));
                }
                if spec.hidden.is_empty() {
                    return Err(Error::config("zoo", format!("spec {i} has no hidden layers")));
                }
                if spec.hidden.contains(&0) || spec.d_rep == 0 {
                    return Err(Error::config("zoo", format!("spec {i} has a zero width")));
                }
            }
        }
        if self.algorithm == AlgorithmKind::FedavgHomo && self.effective_zoo_len() != 1 {
            return Err(Error::config(
                "algorithm",
                "fedavg_homo requires a homogeneous zoo (exactly one spec)",
            ));
        }
        Ok(())
    }

    fn effective_zoo_len(&self) -> usize {
        if self.zoo.is_empty() { DEFAULT_ZOO_HIDDEN.len() } else { self.zoo.len() }
    }

    /// The zoo as concrete extractor specs for `input_dim` inputs.
    pub fn extractor_specs(&self, input_dim: usize) -> Vec<ExtractorSpec> {
        if self.zoo.is_empty() {
            DEFAULT_ZOO_HIDDEN
                .iter()
                .map(|hidden| ExtractorSpec {
                    input_dim,
                    hidden: hidden.to_vec(),
                    d_rep: DEFAULT_D_REP,
                })
                .collect()
        } else {
            self.zoo
                .iter()
                .map(|z| ExtractorSpec {
                    input_dim,
                    hidden: z.hidden.clone(),
                    d_rep: z.d_rep,
                })
                .collect()
        }
    }

    /// Loads (or generates) the dataset this config names.
    pub fn build_dataset(&self) -> Result<LabeledDataset> {
        match &self.dataset {
            DatasetConfig::Blobs { per_class_n, d_in, spread } => {
                gen_blobs(self.s, *per_class_n, *d_in, *spread, SeedStreams::new(self.seed).data())
            }
            DatasetConfig::Idx { images, labels } => load_idx(images, labels),
        }
    }

    /// Runtime parameters for the simulation.
    pub fn sim_params(&self) -> Result<SimParams> {
        Ok(SimParams {
            num_clients: self.n,
            participation: self.c,
            rounds: self.t,
            epochs: self.e,
            batch_size: self.b,
            eta: self.eta,
            algorithm: self.algorithm,
            schedule: StabilizationSchedule::new(self.algo_params.mu0, self.algo_params.t_stable)?,
            fusion: self.algo_params.fusion,
            lambda: self.algo_params.lambda,
            seeds: SeedStreams::new(self.seed),
            record_wall_time: self.record_wall_time,
            parallel: self.parallel,
        })
    }

    pub fn effective_run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}_s{}", self.algorithm.as_str(), self.seed))
    }

    /// The fields that must agree across algorithms for a fair comparison:
    /// everything except `algorithm`, `algo_params`, and the output naming.
    pub fn fairness_fingerprint(&self) -> ExperimentConfig {
        let mut fp = self.clone();
        fp.algorithm = default_algorithm();
        fp.algo_params = AlgoParams::default();
        fp.run_id = None;
        fp
    }
}

/// Parses a config from an optional JSON file plus `key=value` overrides
/// (dotted paths address nested keys; values are parsed as JSON scalars,
/// falling back to strings).
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
        }
        None => serde_json::json!({}),
    };
    for (key, raw) in overrides {
        apply_override(&mut value, key, raw)?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
    config.validate()?;
    Ok(config)
}

fn apply_override(value: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    if !value.is_object() {
        return Err(Error::config(key, "config root is not an object"));
    }
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config(key, "empty path segment"));
        }
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

/// Run status recorded in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

/// Written before the first round and finalized after the last; the config
/// snapshot plus the master seed reproduce the run bit-exactly. The derived
/// stream seeds are recorded for cross-checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub status: RunStatus,
    pub started_unix_ms: u64,
    pub ended_unix_ms: Option<u64>,
    pub seed_streams: SeedDerivations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedDerivations {
    pub master: u64,
    pub data: u64,
    pub partition: u64,
    pub global_init: u64,
    pub sampling: u64,
}

impl SeedDerivations {
    pub fn from_master(master: u64) -> Self {
        let streams = SeedStreams::new(master);
        SeedDerivations {
            master,
            data: streams.data(),
            partition: streams.partition(),
            global_init: streams.global_init(),
            sampling: streams.sampling(),
        }
    }
}

impl RunManifest {
    pub fn new(config: ExperimentConfig) -> Self {
        let seed = config.seed;
        RunManifest {
            config,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Incomplete,
            started_unix_ms: now_ms(),
            ended_unix_ms: None,
            seed_streams: SeedDerivations::from_master(seed),
        }
    }

    pub fn complete(&mut self) {
        self.status = RunStatus::Complete;
        self.ended_unix_ms = Some(now_ms());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
