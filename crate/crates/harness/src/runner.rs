//! Config in, trained models and metrics out.

use std::fmt;
use std::fs;
use std::path::Path;

use fedacnnl_core::acnnl::{layer_stats, train_acnnl, OpCount};
use fedacnnl_core::data::{generate_synthetic, load_idx, partition_dirichlet, split_train_test, Dataset};
use fedacnnl_core::encoding::{make_encoding_set, EncodingSet};
use fedacnnl_core::fed::{
    derive_seed, round_flops_per_sample, run_fedacnnl, simulate_timing, ClientRound, ClientState, ClientWork, FedConfig,
    RoundClock, RoundInput, RoundTiming, TraceEvent,
};
use fedacnnl_core::io::write_weights;
use fedacnnl_core::model::{ModelSpec, WeightSet};
use fedacnnl_core::numerics::relative_frobenius;
use fedacnnl_core::pfed::{run_pfedacnnl, PfedConfig};
use fedacnnl_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ConfigError, DatasetConfig, ExperimentConfig};
use crate::fedavg::{run_fedavg, sgd_flops_per_sample};
use crate::metrics::{evaluate_accuracy, evaluate_shared, to_csv, Accuracy, MetricsRow};
use crate::timing::{client_speeds, SimulatedClock};

// Streams derived from the experiment seed.
const SEED_ENCODING: u64 = 1;
const SEED_PARTITION: u64 = 2;
const SEED_SPLIT: u64 = 3;
const SEED_SAMPLING: u64 = 4;
const SEED_CLUSTER: u64 = 5;
const SEED_SPEEDS: u64 = 6;
const SEED_FEDAVG: u64 = 7;
const SEED_SYNTHETIC: u64 = 8;
const SEED_SUBSET: u64 = 9;

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Core(Error),
}

impl RunError {
    /// 2 for config problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Core(Error::Numeric(_)) => 3,
            RunError::Core(_) => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Core(e)
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Core(Error::Io(e))
    }
}

/// Federated data and model, ready to train.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ModelSpec,
    pub enc: EncodingSet,
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
    pub speeds: Vec<f64>,
}

impl Scenario {
    pub fn union_train(&self) -> Result<Dataset, Error> {
        Dataset::concat(&self.train.iter().collect::<Vec<_>>())
    }

    pub fn clients(&self, cfg: &ExperimentConfig) -> Result<Vec<ClientState>, Error> {
        self.train
            .iter()
            .enumerate()
            .map(|(c, d)| {
                ClientState::new(
                    c,
                    d.clone(),
                    &self.spec,
                    cfg.training.batch_size.get(c),
                    cfg.training.max_batch_size.get(c),
                )
            })
            .collect()
    }

    pub fn clock(&self, cfg: &ExperimentConfig) -> Result<SimulatedClock, Error> {
        SimulatedClock::new(self.speeds.clone(), cfg.cost, cfg.link)
    }
}

fn mnist_pool(dir: &Path, combine_test: bool) -> Result<Dataset, Error> {
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    if !combine_test {
        return Ok(train);
    }
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Dataset::concat(&[&train, &test])
}

/// Loads or generates the data, partitions it and splits each client's share.
pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario, RunError> {
    cfg.validate().map_err(|(t, k, m)| ConfigError {
        line: None,
        message: format!("{t}.{k}: {m}"),
    })?;
    let clients = cfg.partition.clients;
    let train_fraction = 1.0 - cfg.partition.test_fraction;
    let mut train = Vec::with_capacity(clients);
    let mut test = Vec::with_capacity(clients);

    match &cfg.dataset {
        DatasetConfig::Mnist {
            dir,
            combine_test,
            subset,
            normalize,
        } => {
            let mut pool = mnist_pool(dir, *combine_test)?;
            if let Some(n) = *subset {
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SEED_SUBSET])));
                idx.truncate(n.min(pool.len()));
                idx.sort_unstable();
                pool = pool.subset(&idx);
            }
            if let Some(nz) = normalize {
                pool.standardize(nz.mean, nz.std)?;
            }
            let split = partition_dirichlet(
                &pool.classes(),
                pool.class_count(),
                clients,
                cfg.partition.beta,
                cfg.partition.min_samples,
                derive_seed(cfg.seed, &[SEED_PARTITION]),
            )?;
            for (c, idx) in split.clients.iter().enumerate() {
                let (tr, te) = split_train_test(idx, train_fraction, derive_seed(cfg.seed, &[SEED_SPLIT, c as u64]))?;
                train.push(pool.subset(&tr));
                test.push(pool.subset(&te));
            }
        }
        DatasetConfig::Synthetic { .. } => {
            let params = cfg.dataset.synthetic_params(clients).expect("synthetic");
            let sets = generate_synthetic(&params, derive_seed(cfg.seed, &[SEED_SYNTHETIC]))?;
            for (c, d) in sets.iter().enumerate() {
                let all: Vec<usize> = (0..d.len()).collect();
                let (tr, te) = split_train_test(&all, train_fraction, derive_seed(cfg.seed, &[SEED_SPLIT, c as u64]))?;
                train.push(d.subset(&tr));
                test.push(d.subset(&te));
            }
        }
    }

    let classes = train[0].class_count();
    let spec = cfg.model.build(train[0].feature_dim(), classes)?;
    let enc = make_encoding_set(derive_seed(cfg.seed, &[SEED_ENCODING]), &spec);
    let speeds = client_speeds(&cfg.speeds, clients, derive_seed(cfg.seed, &[SEED_SPEEDS]))?;
    Ok(Scenario {
        spec,
        enc,
        train,
        test,
        speeds,
    })
}

pub fn fed_config(cfg: &ExperimentConfig) -> FedConfig {
    FedConfig {
        gamma: cfg.training.gamma,
        sampling_seed: derive_seed(cfg.seed, &[SEED_SAMPLING]),
        adaptive: cfg.training.adaptive,
        parallel: true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub acc_overall: f64,
    pub acc_per_client: Vec<f64>,
    /// Accuracy of the group meta-models before personalization.
    pub acc_meta: Option<f64>,
    pub groups: Option<Vec<Vec<usize>>>,
    pub total_compute_s: f64,
    pub total_idle_s: f64,
    pub total_comm_s: f64,
    /// Longest local personalization pass, in simulated seconds.
    pub personalize_s: Option<f64>,
    pub train_losses: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub timing: RoundTiming,
    pub trace: Vec<TraceEvent>,
    /// Named models to serialize.
    pub weights: Vec<(String, WeightSet)>,
}

fn rows_from_timing(timing: &RoundTiming, final_acc: Option<&Accuracy>) -> Vec<MetricsRow> {
    let last = timing.round_count();
    timing
        .rounds
        .iter()
        .flatten()
        .map(|r: &ClientRound| {
            let acc = final_acc.filter(|_| r.round == last);
            MetricsRow {
                round: r.round,
                client_id: r.client_id,
                compute_s: r.compute,
                idle_s: r.idle,
                comm_s: r.comm(),
                batch_size: r.batch_size,
                acc_overall: acc.map(|a| a.overall),
                acc_client: acc.map(|a| a.per_client[r.client_id]),
            }
        })
        .collect()
}

fn summary(cfg: &ExperimentConfig, timing: &RoundTiming, acc: &Accuracy) -> Summary {
    let all = || timing.rounds.iter().flatten();
    Summary {
        algorithm: cfg.algorithm.name().into(),
        seed: cfg.seed,
        clients: cfg.partition.clients,
        rounds: timing.round_count(),
        acc_overall: acc.overall,
        acc_per_client: acc.per_client.clone(),
        acc_meta: None,
        groups: None,
        total_compute_s: all().map(|r| r.compute).sum(),
        total_idle_s: all().map(|r| r.idle).sum(),
        total_comm_s: all().map(|r| r.comm()).sum(),
        personalize_s: None,
        train_losses: None,
    }
}

fn run_central(cfg: &ExperimentConfig, sc: &Scenario) -> Result<RunReport, RunError> {
    let union = sc.union_train()?;
    let batch = cfg.training.batch_size.get(0);
    let weights = train_acnnl(&union, &sc.spec, &sc.enc, cfg.training.gamma, batch)?;
    let acc = evaluate_shared(&weights, &sc.test, &sc.spec)?;
    // A single full-speed machine with no transfers.
    let clock = SimulatedClock::new(vec![1.0], cfg.cost, cfg.link)?;
    let order: Vec<usize> = (0..union.len()).collect();
    let mut rounds = Vec::new();
    let mut partial = WeightSet::empty(&sc.spec);
    for layer in 0..sc.spec.depth() {
        let (_, ops) = layer_stats(&union, &order, batch, &partial, &sc.spec, &sc.enc, layer)?;
        partial.install(&sc.spec, layer, weights.get(layer)?.clone())?;
        let work = work_for(&sc.spec, layer, 0, batch, ops);
        rounds.push(vec![RoundInput {
            work,
            upload_floats: 0,
            download_floats: 0,
        }]);
    }
    let mut timing = simulate_timing(&rounds, &clock)?;
    for r in timing.rounds.iter_mut().flatten() {
        r.upload = 0.0;
        r.download = 0.0;
        r.arrival = r.start + r.compute;
        r.barrier = r.arrival;
    }
    let rows = rows_from_timing(&timing, None)
        .into_iter()
        .chain(acc.per_client.iter().enumerate().map(|(c, &a)| MetricsRow {
            round: sc.spec.depth(),
            client_id: c,
            compute_s: 0.0,
            idle_s: 0.0,
            comm_s: 0.0,
            batch_size: batch,
            acc_overall: Some(acc.overall),
            acc_client: Some(a),
        }))
        .collect();
    Ok(RunReport {
        summary: summary(cfg, &timing, &acc),
        rows,
        timing,
        trace: Vec::new(),
        weights: vec![("global".into(), weights)],
    })
}

fn work_for(spec: &ModelSpec, layer: usize, client: usize, batch: usize, ops: OpCount) -> ClientWork {
    let t = spec.trainable(layer);
    ClientWork {
        client_id: client,
        layer,
        batch_size: batch,
        ops,
        in_dim: t.in_dim,
        out_dim: t.out_dim,
        rows_per_sample: t.rows_per_sample,
        flops_per_sample: round_flops_per_sample(spec, layer),
    }
}

fn run_fed(cfg: &ExperimentConfig, sc: &Scenario) -> Result<RunReport, RunError> {
    let mut clients = sc.clients(cfg)?;
    let clock = sc.clock(cfg)?;
    let run = run_fedacnnl(&mut clients, &sc.spec, &sc.enc, &fed_config(cfg), &clock)?;
    let acc = evaluate_shared(run.global(), &sc.test, &sc.spec)?;
    Ok(RunReport {
        rows: rows_from_timing(&run.timing, Some(&acc)),
        summary: summary(cfg, &run.timing, &acc),
        timing: run.timing.clone(),
        trace: run.trace.clone(),
        weights: vec![("global".into(), run.into_global())],
    })
}

fn run_pfed(cfg: &ExperimentConfig, sc: &Scenario) -> Result<RunReport, RunError> {
    let mut clients = sc.clients(cfg)?;
    let clock = sc.clock(cfg)?;
    let pcfg = PfedConfig {
        fed: fed_config(cfg),
        epsilon: cfg.training.epsilon,
        k: cfg.training.k,
        cluster_seed: derive_seed(cfg.seed, &[SEED_CLUSTER]),
    };
    let run = run_pfedacnnl(&mut clients, &sc.spec, &sc.enc, &pcfg, &clock)?;
    let personal: Vec<&WeightSet> = run.personalized.iter().collect();
    let acc = evaluate_accuracy(&personal, &sc.test, &sc.spec)?;
    let meta_models: Vec<&WeightSet> = clients
        .iter()
        .map(|c| &run.meta.group_weights[run.group_of(c.id).expect("grouped")])
        .collect();
    let meta_acc = evaluate_accuracy(&meta_models, &sc.test, &sc.spec)?;

    // One local pass per layer at the client's final batch size.
    let mut personalize_s: f64 = 0.0;
    for c in &clients {
        let mut secs = 0.0;
        for layer in 0..sc.spec.depth() {
            let n = c.data.len();
            let batches = n.div_ceil(c.batch_size);
            let hidden = !sc.spec.is_output(layer);
            let ops = OpCount {
                batches,
                forwards: if layer > 0 { batches } else { 0 },
                matmuls: batches * if hidden { 3 } else { 2 },
                rows: n,
            };
            secs += clock.compute_seconds(&work_for(&sc.spec, layer, c.id, c.batch_size, ops))?;
        }
        personalize_s = personalize_s.max(secs);
    }

    let mut s = summary(cfg, &run.meta.timing, &acc);
    s.acc_meta = Some(meta_acc.overall);
    s.groups = Some(run.groups.clone());
    s.personalize_s = Some(personalize_s);
    let mut weights: Vec<(String, WeightSet)> = run
        .meta
        .group_weights
        .iter()
        .enumerate()
        .map(|(k, w)| (format!("meta_{k:03}"), w.clone()))
        .collect();
    weights.extend(clients.iter().zip(&run.personalized).map(|(c, w)| (format!("client_{:03}", c.id), w.clone())));
    Ok(RunReport {
        rows: rows_from_timing(&run.meta.timing, Some(&acc)),
        summary: s,
        timing: run.meta.timing.clone(),
        trace: run.meta.trace.clone(),
        weights,
    })
}

fn run_sgd(cfg: &ExperimentConfig, sc: &Scenario) -> Result<RunReport, RunError> {
    let clock = sc.clock(cfg)?;
    let f = cfg.fedavg;
    let mut per_round_acc = Vec::new();
    let run = run_fedavg(&sc.train, &sc.spec, &f, derive_seed(cfg.seed, &[SEED_FEDAVG]), |_, w| {
        per_round_acc.push(evaluate_shared(w, &sc.test, &sc.spec)?);
        Ok(())
    })?;
    let floats: usize = sc.spec.trainable_layers().iter().map(|t| t.in_dim * t.out_dim).sum();
    let flops = sgd_flops_per_sample(&sc.spec);
    let inputs: Vec<Vec<RoundInput>> = (0..f.rounds)
        .map(|_| {
            sc.train
                .iter()
                .enumerate()
                .map(|(c, d)| {
                    let batches = d.len().div_ceil(f.batch_size) * f.local_epochs;
                    RoundInput {
                        work: ClientWork {
                            client_id: c,
                            layer: 0,
                            batch_size: f.batch_size,
                            ops: OpCount {
                                batches,
                                forwards: batches,
                                matmuls: batches * 3 * sc.spec.depth(),
                                rows: d.len() * f.local_epochs,
                            },
                            in_dim: sc.spec.input_len(),
                            out_dim: sc.spec.classes(),
                            rows_per_sample: 1,
                            flops_per_sample: flops,
                        },
                        upload_floats: floats,
                        download_floats: floats,
                    }
                })
                .collect()
        })
        .collect();
    let timing = simulate_timing(&inputs, &clock)?;
    let mut rows = Vec::new();
    for (round, records) in timing.rounds.iter().enumerate() {
        let acc = &per_round_acc[round];
        rows.extend(records.iter().map(|r| MetricsRow {
            round: r.round,
            client_id: r.client_id,
            compute_s: r.compute,
            idle_s: r.idle,
            comm_s: r.comm(),
            batch_size: r.batch_size,
            acc_overall: Some(acc.overall),
            acc_client: Some(acc.per_client[r.client_id]),
        }));
    }
    let acc = per_round_acc.last().expect("at least one round");
    let mut s = summary(cfg, &timing, acc);
    s.train_losses = Some(run.losses.clone());
    Ok(RunReport {
        rows,
        summary: s,
        timing,
        trace: Vec::new(),
        weights: vec![("global".into(), run.weights)],
    })
}

pub fn run_scenario(cfg: &ExperimentConfig, sc: &Scenario) -> Result<RunReport, RunError> {
    match cfg.algorithm {
        Algorithm::Acnnl => run_central(cfg, sc),
        Algorithm::Fedacnnl => run_fed(cfg, sc),
        Algorithm::Pfedacnnl => run_pfed(cfg, sc),
        Algorithm::Fedavg => run_sgd(cfg, sc),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    run_scenario(cfg, &build_scenario(cfg)?)
}

/// Writes `metrics.csv`, `summary.json`, `trace.jsonl` and `weights/*.bin`.
pub fn write_outputs(report: &RunReport, dir: &Path, with_weights: bool, with_trace: bool) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), to_csv(&report.rows)?)?;
    let json = serde_json::to_string_pretty(&report.summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    if with_trace {
        let mut lines = String::new();
        for e in &report.trace {
            lines.push_str(&serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?);
            lines.push('\n');
        }
        fs::write(dir.join("trace.jsonl"), lines)?;
    }
    if with_weights {
        let wdir = dir.join("weights");
        fs::create_dir_all(&wdir)?;
        for (name, w) in &report.weights {
            write_weights(wdir.join(format!("{name}.bin")), w)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub clients: usize,
    pub per_layer: Vec<f64>,
    pub max_deviation: f64,
}

/// Federated weights on the scenario against centralized training on the
/// union of the client shards.
pub fn oracle_check(cfg: &ExperimentConfig, sc: &Scenario) -> Result<OracleReport, RunError> {
    let union = sc.union_train()?;
    let central = train_acnnl(&union, &sc.spec, &sc.enc, cfg.training.gamma, union.len())?;
    let mut clients = sc.clients(cfg)?;
    let run = run_fedacnnl(&mut clients, &sc.spec, &sc.enc, &fed_config(cfg), &sc.clock(cfg)?)?;
    let per_layer = (0..sc.spec.depth())
        .map(|l| relative_frobenius(run.global().get(l)?, central.get(l)?))
        .collect::<Result<Vec<f64>, Error>>()?;
    Ok(OracleReport {
        clients: clients.len(),
        max_deviation: per_layer.iter().copied().fold(0.0, f64::max),
        per_layer,
    })
}
