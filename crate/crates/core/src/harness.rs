//! Experiment driver: configuration, method dispatch, seeded repetitions,
//! threshold sweeps and result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::SingularCutoff;
use crate::dataset::{load_dataset, partition, split_train_test, ClientShard, LabeledTable, PartitionSpec};
use crate::error::{Error, Result};
use crate::learner::{fit_classifier, TrainConfig};
use crate::protocol::{
    client_prepare_upload, mean_accuracy, prepare_all, run_round, run_round_from_uploads, AnalystConfig, Grouping,
};
use crate::reduction::{apply_reducer, generate_anchor, AnchorData};
use crate::seed::{derive_seed, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DcCfl,
    Dc,
    Local,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::DcCfl => "dc_cfl",
            Method::Dc => "dc",
            Method::Local => "local",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dc_cfl" => Ok(Method::DcCfl),
            "dc" => Ok(Method::Dc),
            "local" => Ok(Method::Local),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Intermediate representation width each client targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetDim {
    /// `m - 1`
    #[default]
    MMinusOne,
    Fixed(usize),
}

impl TargetDim {
    pub fn resolve(&self, m: usize) -> usize {
        match *self {
            TargetDim::MMinusOne => m.saturating_sub(1),
            TargetDim::Fixed(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub label_column: String,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionSpec,
    #[serde(default = "defaults::method")]
    pub method: Method,
    #[serde(default = "defaults::anchor_size")]
    pub anchor_size: usize,
    #[serde(default)]
    pub target_dim: TargetDim,
    #[serde(default)]
    pub cutoff: SingularCutoff,
    #[serde(default = "defaults::thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "defaults::hidden_candidates")]
    pub hidden_candidates: Vec<(usize, usize)>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "defaults::validation_ratio")]
    pub validation_ratio: f64,
    #[serde(default = "defaults::num_runs")]
    pub num_runs: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use super::Method;

    pub fn method() -> Method {
        Method::DcCfl
    }
    pub fn anchor_size() -> usize {
        1000
    }
    pub fn thresholds() -> Vec<f64> {
        (1..=9).map(|i| i as f64 / 10.0).collect()
    }
    pub fn hidden_candidates() -> Vec<(usize, usize)> {
        vec![(64, 32), (32, 16)]
    }
    pub fn validation_ratio() -> f64 {
        0.2
    }
    pub fn num_runs() -> usize {
        10
    }
}

impl ExperimentConfig {
    /// Full-scale defaults for a dataset and partition.
    pub fn new(dataset: DatasetConfig, partition: PartitionSpec, method: Method) -> Self {
        Self {
            dataset,
            partition,
            method,
            anchor_size: defaults::anchor_size(),
            target_dim: TargetDim::default(),
            cutoff: SingularCutoff::default(),
            thresholds: defaults::thresholds(),
            hidden_candidates: defaults::hidden_candidates(),
            train: TrainConfig::default(),
            validation_ratio: defaults::validation_ratio(),
            num_runs: defaults::num_runs(),
            seed: 0,
        }
    }

    /// Reads JSON (`.json`) or TOML (anything else).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        // relative dataset paths resolve against the config file
        let mut cfg = cfg;
        if cfg.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                let joined = dir.join(&cfg.dataset.path);
                if joined.exists() {
                    cfg.dataset.path = joined;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == Method::DcCfl && self.thresholds.is_empty() {
            return Err(Error::Config("dc_cfl needs at least one threshold".into()));
        }
        if self.num_runs == 0 {
            return Err(Error::Config("num_runs must be at least 1".into()));
        }
        if self.anchor_size == 0 {
            return Err(Error::Config("anchor_size must be at least 1".into()));
        }
        if self.hidden_candidates.is_empty() {
            return Err(Error::Config("hidden_candidates is empty".into()));
        }
        self.train.validate()
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.name.clone().unwrap_or_else(|| {
            self.dataset
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, &[tag("run"), run as u64])
    }

    fn analyst_config(&self, num_classes: usize, grouping: Grouping, run_seed: u64) -> AnalystConfig {
        AnalystConfig {
            num_classes,
            grouping,
            thresholds: self.thresholds.clone(),
            hidden_candidates: self.hidden_candidates.clone(),
            cutoff: self.cutoff,
            train: self.train.clone(),
            validation_ratio: self.validation_ratio,
            seed: derive_seed(run_seed, &[tag("analyst")]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub partition: String,
    pub method: Method,
    pub seed: u64,
    pub chosen_t: Option<f64>,
    pub per_client: Vec<f64>,
    pub mean_accuracy: f64,
    pub n_clients: usize,
    pub wall_seconds: f64,
}

impl ResultRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &ResultRecord) -> bool {
        self.dataset == other.dataset
            && self.partition == other.partition
            && self.method == other.method
            && self.seed == other.seed
            && self.chosen_t == other.chosen_t
            && self.per_client == other.per_client
            && self.mean_accuracy == other.mean_accuracy
    }
}

/// Shards and anchor for one seeded run.
pub struct RunSetup {
    pub run_seed: u64,
    pub shards: Vec<ClientShard>,
    pub anchor: AnchorData,
    pub target_dim: usize,
}

/// Partitions the table and draws the anchor for one run. Anchor bounds come
/// from the full table before partitioning.
pub fn setup_run(cfg: &ExperimentConfig, table: &LabeledTable, run: usize) -> Result<RunSetup> {
    let run_seed = cfg.run_seed(run);
    let spec = PartitionSpec {
        seed: derive_seed(run_seed, &[tag("partition")]),
        ..cfg.partition.clone()
    };
    let shards = partition(table, &spec)?;
    let (lo, hi) = table.feature_bounds();
    let anchor = generate_anchor(&lo, &hi, cfg.anchor_size, derive_seed(run_seed, &[tag("anchor")]))?;
    Ok(RunSetup {
        run_seed,
        shards,
        anchor,
        target_dim: cfg.target_dim.resolve(table.n_features()),
    })
}

/// Each client trains on its own reduced data, choosing hidden sizes on a
/// local validation split.
fn run_local(cfg: &ExperimentConfig, setup: &RunSetup, num_classes: usize) -> Result<(Vec<f64>, Option<f64>)> {
    let per_client = setup
        .shards
        .par_iter()
        .map(|shard| {
            let (reducer, upload) = client_prepare_upload(shard, &setup.anchor, setup.target_dim)?;
            let seed = derive_seed(setup.run_seed, &[tag("local"), shard.client_id as u64]);
            let x = &upload.intermediate_train;
            let y = &upload.labels;
            let hidden = if cfg.hidden_candidates.len() == 1 {
                cfg.hidden_candidates[0]
            } else {
                let table = LabeledTable::new(x.clone(), y.clone(), num_classes);
                // A one-column reduction cannot form a table; skip selection then.
                match table {
                    Ok(t) if t.n_rows() >= 2 => {
                        let (tr, va) = split_train_test(&t, cfg.validation_ratio, derive_seed(seed, &[tag("validation")]))?;
                        let mut best = (f64::NEG_INFINITY, cfg.hidden_candidates[0]);
                        for &h in &cfg.hidden_candidates {
                            let tc = cfg.train.with_seed(derive_seed(seed, &[tag("validate"), h.0 as u64, h.1 as u64]));
                            let model = fit_classifier(tr.features(), tr.labels(), h, num_classes, &tc)?;
                            let acc = model.evaluate(va.features(), va.labels())?;
                            if acc > best.0 {
                                best = (acc, h);
                            }
                        }
                        best.1
                    }
                    _ => cfg.hidden_candidates[0],
                }
            };
            let tc = cfg.train.with_seed(derive_seed(seed, &[tag("final"), hidden.0 as u64, hidden.1 as u64]));
            let model = fit_classifier(x, y, hidden, num_classes, &tc)?;
            let test = apply_reducer(&reducer, shard.test.features())?;
            model.evaluate(&test, shard.test.labels())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((per_client, None))
}

fn run_once(cfg: &ExperimentConfig, table: &LabeledTable, name: &str, run: usize) -> Result<ResultRecord> {
    let started = Instant::now();
    let setup = setup_run(cfg, table, run)?;
    let k = table.num_classes();
    let (per_client, chosen_t) = match cfg.method {
        Method::DcCfl | Method::Dc => {
            let grouping = if cfg.method == Method::Dc { Grouping::SingleCluster } else { Grouping::Clustered };
            let acfg = cfg.analyst_config(k, grouping, setup.run_seed);
            let outcome = run_round(&setup.shards, &setup.anchor, setup.target_dim, &acfg)?;
            (outcome.evaluation.per_client, outcome.report.chosen_t)
        }
        Method::Local => run_local(cfg, &setup, k)?,
    };
    Ok(ResultRecord {
        dataset: name.to_string(),
        partition: cfg.partition.descriptor(),
        method: cfg.method,
        seed: setup.run_seed,
        chosen_t,
        mean_accuracy: mean_accuracy(&per_client),
        n_clients: per_client.len(),
        per_client,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Loads the configured dataset and runs every seed.
pub fn run_method(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let table = load_dataset(&cfg.dataset.path, &cfg.dataset.label_column, cfg.dataset.num_classes)?;
    run_method_on_table(cfg, &table, &cfg.dataset_name())
}

/// Runs every seed on an in-memory table; records come back in seed order.
pub fn run_method_on_table(cfg: &ExperimentConfig, table: &LabeledTable, name: &str) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    (0..cfg.num_runs)
        .into_par_iter()
        .map(|run| {
            run_once(cfg, table, name, run).map_err(|e| Error::Run {
                run,
                seed: cfg.run_seed(run),
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub mean_validation_accuracy: f64,
    pub mean_test_accuracy: f64,
    /// Mean cluster count over runs.
    pub num_clusters: f64,
}

/// One pipeline per threshold, sharing partitions and uploads within a run.
pub fn sweep_threshold(cfg: &ExperimentConfig, table: &LabeledTable, t_values: &[f64]) -> Result<Vec<SweepRow>> {
    if t_values.is_empty() {
        return Err(Error::invalid("no threshold values to sweep"));
    }
    cfg.validate()?;
    let k = table.num_classes();
    let per_run: Vec<Vec<(f64, f64, usize)>> = (0..cfg.num_runs)
        .into_par_iter()
        .map(|run| -> Result<Vec<(f64, f64, usize)>> {
            let setup = setup_run(cfg, table, run)?;
            let (reducers, uploads) = prepare_all(&setup.shards, &setup.anchor, setup.target_dim)?;
            t_values
                .iter()
                .map(|&t| {
                    let mut acfg = cfg.analyst_config(k, Grouping::Clustered, setup.run_seed);
                    acfg.thresholds = vec![t];
                    let out = run_round_from_uploads(&setup.shards, reducers.clone(), uploads.clone(), &acfg)?;
                    let val = out
                        .report
                        .candidates
                        .iter()
                        .find(|c| c.hidden == out.report.chosen_hidden_sizes)
                        .map_or(f64::NAN, |c| c.mean_validation_accuracy);
                    Ok((val, out.evaluation.mean, out.report.partition.num_clusters()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let runs = per_run.len() as f64;
    Ok(t_values
        .iter()
        .enumerate()
        .map(|(i, &t)| SweepRow {
            t,
            mean_validation_accuracy: per_run.iter().map(|r| r[i].0).sum::<f64>() / runs,
            mean_test_accuracy: per_run.iter().map(|r| r[i].1).sum::<f64>() / runs,
            num_clusters: per_run.iter().map(|r| r[i].2 as f64).sum::<f64>() / runs,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultFormat {
    Csv,
    Jsonl,
}

impl FromStr for ResultFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ResultFormat::Csv),
            "jsonl" => Ok(ResultFormat::Jsonl),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

pub const CSV_HEADER: [&str; 8] = ["dataset", "partition", "method", "seed", "t", "mean_acc", "n_clients", "wall_s"];

/// One row of the CSV result format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub dataset: String,
    pub partition: String,
    pub method: Method,
    pub seed: u64,
    pub t: Option<f64>,
    pub mean_acc: f64,
    pub n_clients: usize,
    pub wall_s: f64,
}

impl From<&ResultRecord> for CsvRow {
    fn from(r: &ResultRecord) -> Self {
        CsvRow {
            dataset: r.dataset.clone(),
            partition: r.partition.clone(),
            method: r.method,
            seed: r.seed,
            t: r.chosen_t,
            mean_acc: r.mean_accuracy,
            n_clients: r.n_clients,
            wall_s: r.wall_seconds,
        }
    }
}

pub fn write_results(records: &[ResultRecord], path: impl AsRef<Path>, format: ResultFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ResultFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
            w.write_record(CSV_HEADER)?;
            for r in records {
                w.serialize(CsvRow::from(r))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        ResultFormat::Jsonl => {
            let mut body = String::new();
            for r in records {
                body.push_str(&serde_json::to_string(r)?);
                body.push('\n');
            }
            fs::write(path, body).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_results_jsonl(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_sweep(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and spread of the per-run mean accuracy for one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub partition: String,
    pub method: Method,
    pub runs: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

pub fn summarize(rows: &[CsvRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, String, Method), Vec<f64>)> = Vec::new();
    for r in rows {
        let key = (r.dataset.clone(), r.partition.clone(), r.method);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.mean_acc),
            None => groups.push((key, vec![r.mean_acc])),
        }
    }
    groups
        .into_iter()
        .map(|((dataset, partition, method), accs)| {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                dataset,
                partition,
                method,
                runs: accs.len(),
                mean_acc: mean,
                std_acc: var.sqrt(),
            }
        })
        .collect()
}
