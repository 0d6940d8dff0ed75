//! Experiment description, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};

use fedacnnl_core::data::SyntheticParams;
use fedacnnl_core::model::ModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Acnnl,
    Fedacnnl,
    Pfedacnnl,
    Fedavg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Acnnl => "acnnl",
            Algorithm::Fedacnnl => "fedacnnl",
            Algorithm::Pfedacnnl => "pfedacnnl",
            Algorithm::Fedavg => "fedavg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Algorithm::Acnnl, Algorithm::Fedacnnl, Algorithm::Pfedacnnl, Algorithm::Fedavg]
            .into_iter()
            .find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalize {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX files `train-images-idx3-ubyte` etc. under `dir`.
    Mnist {
        dir: PathBuf,
        /// Merge the official test split into the pool before partitioning.
        #[serde(default = "yes")]
        combine_test: bool,
        /// Seeded random subset of the pool.
        #[serde(default)]
        subset: Option<usize>,
        #[serde(default)]
        normalize: Option<Normalize>,
    },
    Synthetic {
        alpha: f64,
        beta: f64,
        #[serde(default = "default_syn_dim")]
        dim: usize,
        #[serde(default = "default_syn_classes")]
        classes: usize,
        #[serde(default = "default_syn_total")]
        total_samples: usize,
        #[serde(default = "default_syn_min")]
        min_samples: usize,
        #[serde(default = "default_syn_exponent")]
        power_exponent: f64,
    },
}

fn yes() -> bool {
    true
}
fn default_syn_dim() -> usize {
    60
}
fn default_syn_classes() -> usize {
    10
}
fn default_syn_total() -> usize {
    10_000
}
fn default_syn_min() -> usize {
    20
}
fn default_syn_exponent() -> f64 {
    1.2
}

impl DatasetConfig {
    pub fn synthetic_params(&self, clients: usize) -> Option<SyntheticParams> {
        match *self {
            DatasetConfig::Synthetic {
                alpha,
                beta,
                dim,
                classes,
                total_samples,
                min_samples,
                power_exponent,
            } => Some(SyntheticParams {
                alpha,
                beta,
                clients,
                dim,
                classes,
                total_samples,
                min_samples,
                power_exponent,
            }),
            DatasetConfig::Mnist { .. } => None,
        }
    }

    fn feature_dim(&self) -> usize {
        match self {
            DatasetConfig::Mnist { .. } => 784,
            DatasetConfig::Synthetic { dim, .. } => *dim,
        }
    }

    fn classes(&self) -> usize {
        match self {
            DatasetConfig::Mnist { .. } => 10,
            DatasetConfig::Synthetic { classes, .. } => *classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    /// Dirichlet concentration; used when the pool is split by label.
    #[serde(default = "default_dirichlet")]
    pub beta: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_dirichlet() -> f64 {
    0.1
}
fn default_min_samples() -> usize {
    2
}
fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Logistic,
    Mlp {
        hidden: Vec<usize>,
    },
    Dcnn {
        height: usize,
        width: usize,
        channels: usize,
        widths: [usize; 4],
    },
}

impl ModelConfig {
    pub fn build(&self, in_dim: usize, classes: usize) -> fedacnnl_core::Result<ModelSpec> {
        match self {
            ModelConfig::Logistic => Ok(ModelSpec::logistic(in_dim, classes)),
            ModelConfig::Mlp { hidden } => Ok(ModelSpec::mlp(in_dim, hidden, classes)),
            ModelConfig::Dcnn {
                height,
                width,
                channels,
                widths,
            } => ModelSpec::dcnn(*height, *width, *channels, *widths, classes),
        }
    }
}

/// One value for every client, or one per client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerClient {
    All(usize),
    Each(Vec<usize>),
}

impl PerClient {
    pub fn get(&self, client: usize) -> usize {
        match self {
            PerClient::All(v) => *v,
            PerClient::Each(v) => v[client],
        }
    }

    fn check(&self, clients: usize) -> Result<(), String> {
        match self {
            PerClient::Each(v) if v.len() != clients => Err(format!("has {} entries for {clients} clients", v.len())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_b1")]
    pub batch_size: PerClient,
    #[serde(default = "default_bmax")]
    pub max_batch_size: PerClient,
    #[serde(default)]
    pub adaptive: bool,
}

fn default_gamma() -> f64 {
    100.0
}
fn default_epsilon() -> f64 {
    2500.0
}
fn default_k() -> usize {
    10
}
fn default_b1() -> PerClient {
    PerClient::All(64)
}
fn default_bmax() -> PerClient {
    PerClient::All(1024)
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            gamma: default_gamma(),
            epsilon: default_epsilon(),
            k: default_k(),
            batch_size: default_b1(),
            max_batch_size: default_bmax(),
            adaptive: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_sgd_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    0.1
}
fn one() -> usize {
    1
}
fn default_rounds() -> usize {
    20
}
fn default_sgd_batch() -> usize {
    32
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        FedAvgConfig {
            lr: default_lr(),
            local_epochs: 1,
            rounds: default_rounds(),
            batch_size: default_sgd_batch(),
        }
    }
}

/// Relative compute rate of each client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "lowercase", deny_unknown_fields)]
pub enum SpeedProfile {
    /// Every client at rate 1.
    Equal,
    /// A seeded core count in `1..=max_cores`, rate `cores / max_cores`.
    Cores {
        #[serde(default = "default_cores")]
        max_cores: usize,
    },
    /// Seeded uniform rate in `[min, max]`.
    Uniform { min: f64, max: f64 },
    Fixed { values: Vec<f64> },
}

fn default_cores() -> usize {
    4
}

impl Default for SpeedProfile {
    fn default() -> Self {
        SpeedProfile::Cores { max_cores: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    #[serde(default = "default_latency")]
    pub latency_s: f64,
    /// Bytes per second; `inf` makes transfers free apart from latency.
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bps: f64,
}

fn default_latency() -> f64 {
    0.005
}
fn default_bandwidth() -> f64 {
    1.25e8
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            latency_s: default_latency(),
            bandwidth_bps: default_bandwidth(),
        }
    }
}

/// Per batch cost `per_batch_s + rows · flops_per_sample · per_flop_s`,
/// divided by the client's rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default = "default_per_batch")]
    pub per_batch_s: f64,
    #[serde(default = "default_per_flop")]
    pub per_flop_s: f64,
}

fn default_per_batch() -> f64 {
    2e-3
}
fn default_per_flop() -> f64 {
    1e-9
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            per_batch_s: default_per_batch(),
            per_flop_s: default_per_flop(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub weights: bool,
    #[serde(default = "yes")]
    pub trace: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_out(),
            weights: true,
            trace: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub fedavg: FedAvgConfig,
    #[serde(default)]
    pub speeds: SpeedProfile,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A config problem, anchored to a line of the source when possible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line of `key = …` inside `[table]` (or at top level when `table` is empty).
fn locate(src: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut table_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            if current == table {
                table_line = Some(i + 1);
            }
            continue;
        }
        if current == table {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    table_line
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of(src, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|(table, key, message)| ConfigError {
            line: locate(src, table, key),
            message: if table.is_empty() {
                format!("{key}: {message}")
            } else {
                format!("{table}.{key}: {message}")
            },
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Semantic checks; on failure names the offending table and key.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let clients = self.partition.clients;
        let t = &self.training;
        let bad = |table, key, msg: String| Err((table, key, msg));
        if clients == 0 {
            return bad("partition", "clients", "must be at least 1".into());
        }
        if !(self.partition.test_fraction > 0.0 && self.partition.test_fraction < 1.0) {
            return bad("partition", "test_fraction", "must lie in (0, 1)".into());
        }
        if !(self.partition.beta > 0.0) || !self.partition.beta.is_finite() {
            return bad("partition", "beta", "must be positive".into());
        }
        match &self.dataset {
            DatasetConfig::Mnist { subset, normalize, .. } => {
                if subset.is_some_and(|n| n < clients * self.partition.min_samples.max(2)) {
                    return bad("dataset", "subset", format!("too small for {clients} clients"));
                }
                if normalize.is_some_and(|n| !(n.std > 0.0) || !n.mean.is_finite()) {
                    return bad("dataset", "normalize", "std must be positive and mean finite".into());
                }
                if self.partition.min_samples < 2 {
                    return bad("partition", "min_samples", "must be at least 2 so each client keeps a test sample".into());
                }
            }
            DatasetConfig::Synthetic {
                alpha,
                beta,
                total_samples,
                min_samples,
                dim,
                classes,
                ..
            } => {
                if !(*alpha >= 0.0) {
                    return bad("dataset", "alpha", "must be non-negative".into());
                }
                if !(*beta >= 0.0) {
                    return bad("dataset", "beta", "must be non-negative".into());
                }
                if *dim == 0 || *classes < 2 {
                    return bad("dataset", "dim", "dim must be positive and classes at least 2".into());
                }
                if *min_samples < 2 {
                    return bad("dataset", "min_samples", "must be at least 2".into());
                }
                if *total_samples < clients * min_samples {
                    return bad("dataset", "total_samples", format!("cannot give {clients} clients {min_samples} each"));
                }
            }
        }
        if let Err(e) = self.model.build(self.dataset.feature_dim(), self.dataset.classes()) {
            return bad("model", "kind", e.to_string());
        }
        if !(t.gamma > 0.0) || !t.gamma.is_finite() {
            return bad("training", "gamma", "must be positive".into());
        }
        if !(t.epsilon > 0.0) || !t.epsilon.is_finite() {
            return bad("training", "epsilon", "must be positive".into());
        }
        if self.algorithm == Algorithm::Pfedacnnl && (t.k == 0 || t.k > clients) {
            return bad("training", "k", format!("must lie in 1..={clients}"));
        }
        if let Err(m) = t.batch_size.check(clients) {
            return bad("training", "batch_size", m);
        }
        if let Err(m) = t.max_batch_size.check(clients) {
            return bad("training", "max_batch_size", m);
        }
        for c in 0..clients {
            let (b1, bmax) = (t.batch_size.get(c), t.max_batch_size.get(c));
            if b1 == 0 || b1 > bmax {
                return bad("training", "batch_size", format!("client {c}: need 1 <= {b1} <= max_batch_size {bmax}"));
            }
        }
        let f = &self.fedavg;
        if self.algorithm == Algorithm::Fedavg {
            if !(f.lr > 0.0) || f.rounds == 0 || f.local_epochs == 0 || f.batch_size == 0 {
                return bad("fedavg", "lr", "lr, rounds, local_epochs and batch_size must be positive".into());
            }
            if matches!(self.model, ModelConfig::Dcnn { .. }) {
                return bad("model", "kind", "the SGD baseline supports dense models only".into());
            }
        }
        match &self.speeds {
            SpeedProfile::Equal => {}
            SpeedProfile::Cores { max_cores } if *max_cores == 0 => {
                return bad("speeds", "max_cores", "must be positive".into())
            }
            SpeedProfile::Cores { .. } => {}
            SpeedProfile::Uniform { min, max } => {
                if !(*min > 0.0 && min <= max && max.is_finite()) {
                    return bad("speeds", "min", "need 0 < min <= max".into());
                }
            }
            SpeedProfile::Fixed { values } => {
                if values.len() != clients {
                    return bad("speeds", "values", format!("has {} entries for {clients} clients", values.len()));
                }
                if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return bad("speeds", "values", "rates must be positive".into());
                }
            }
        }
        if !(self.link.latency_s >= 0.0) || !self.link.latency_s.is_finite() {
            return bad("link", "latency_s", "must be non-negative".into());
        }
        if !(self.link.bandwidth_bps > 0.0) {
            return bad("link", "bandwidth_bps", "must be positive".into());
        }
        if !(self.cost.per_batch_s >= 0.0) || !(self.cost.per_flop_s >= 0.0) {
            return bad("cost", "per_batch_s", "costs must be non-negative".into());
        }
        Ok(())
    }
}
