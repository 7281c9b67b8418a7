//! The single-round protocol: clients upload reduced data once, the analyst
//! clusters clients by label distribution, aligns and trains one model per
//! cluster, and sends each client its mapping and cluster model once.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{compute_mappings, integrate, SingularCutoff};
use crate::clustering::{build_distance_matrix, complete_linkage_clusters, label_distribution, ClusterPartition};
use crate::dataset::{stratified_split_indices, ClientShard};
use crate::error::{Error, Result};
use crate::learner::{fit_classifier, Classifier, TrainConfig};
use crate::reduction::{apply_reducer, fit_reducer, AnchorData, Reducer};
use crate::seed::{derive_seed, tag};

/// What a client sends: reduced training rows, reduced anchor, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub intermediate_train: DMatrix<f64>,
    pub intermediate_anchor: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl Upload {
    pub fn reduced_dim(&self) -> usize {
        self.intermediate_train.ncols()
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.intermediate_anchor.ncols() != self.intermediate_train.ncols() {
            return Err(Error::Protocol(format!(
                "client {}: train rep has {} columns, anchor rep {}",
                self.client_id,
                self.intermediate_train.ncols(),
                self.intermediate_anchor.ncols()
            )));
        }
        if self.labels.len() != self.intermediate_train.nrows() {
            return Err(Error::Protocol(format!(
                "client {}: {} labels for {} rows",
                self.client_id,
                self.labels.len(),
                self.intermediate_train.nrows()
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::Protocol(format!("client {} uploaded no rows", self.client_id)));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Protocol(format!(
                "client {}: label {y} outside 0..{num_classes}",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// What the analyst returns: the client's mapping and its cluster's model.
#[derive(Debug, Clone)]
pub struct Download {
    pub client_id: usize,
    pub cluster_id: usize,
    pub mapping: DMatrix<f64>,
    pub model: Arc<Classifier>,
}

/// Reduces a shard's training rows and the shared anchor with a freshly
/// fitted private reducer. The reducer stays with the client.
pub fn client_prepare_upload(shard: &ClientShard, anchor: &AnchorData, target_dim: usize) -> Result<(Reducer, Upload)> {
    if shard.train.is_empty() {
        return Err(Error::invalid(format!("client {} has no training rows", shard.client_id)));
    }
    let reducer = fit_reducer(shard.train.features(), target_dim)?;
    let upload = Upload {
        client_id: shard.client_id,
        intermediate_train: apply_reducer(&reducer, shard.train.features())?,
        intermediate_anchor: apply_reducer(&reducer, &anchor.rows)?,
        labels: shard.train.labels().to_vec(),
    };
    Ok((reducer, upload))
}

/// How the analyst groups clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Complete-linkage clustering at each candidate threshold.
    Clustered,
    /// Everyone in one cluster, no clustering step.
    SingleCluster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalystConfig {
    pub num_classes: usize,
    pub grouping: Grouping,
    /// Candidate thresholds; the best on validation is used.
    pub thresholds: Vec<f64>,
    pub hidden_candidates: Vec<(usize, usize)>,
    pub cutoff: SingularCutoff,
    pub train: TrainConfig,
    pub validation_ratio: f64,
    pub seed: u64,
}

impl AnalystConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            grouping: Grouping::Clustered,
            thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            hidden_candidates: vec![(64, 32), (32, 16)],
            cutoff: SingularCutoff::default(),
            train: TrainConfig::default(),
            validation_ratio: 0.2,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grouping == Grouping::Clustered && self.thresholds.is_empty() {
            return Err(Error::invalid("no threshold candidates"));
        }
        if let Some(t) = self.thresholds.iter().find(|t| t.is_nan() || **t < 0.0) {
            return Err(Error::invalid(format!("threshold {t} must be non-negative")));
        }
        if self.hidden_candidates.is_empty() {
            return Err(Error::invalid("no hidden-size candidates"));
        }
        if !(self.validation_ratio > 0.0 && self.validation_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "validation_ratio {} outside (0, 1)",
                self.validation_ratio
            )));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub members: Vec<usize>,
    pub integrated_dim: usize,
    pub validation_accuracy: f64,
}

/// Mean validation accuracy of one (threshold, hidden sizes) candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub threshold: Option<f64>,
    pub hidden: (usize, usize),
    pub num_clusters: usize,
    pub mean_validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalystReport {
    /// Clusters expressed in client ids.
    pub partition: ClusterPartition,
    pub per_cluster: Vec<ClusterSummary>,
    pub chosen_t: Option<f64>,
    pub chosen_hidden_sizes: (usize, usize),
    pub candidates: Vec<CandidateScore>,
}

/// Analyst-side state for one cluster: aligned data and its validation split.
struct ClusterFit {
    mappings: Vec<DMatrix<f64>>,
    features: DMatrix<f64>,
    labels: Vec<usize>,
    train_rows: Vec<usize>,
    val_rows: Vec<usize>,
    seed: u64,
}

impl ClusterFit {
    fn build(members: &[usize], uploads: &[Upload], cfg: &AnalystConfig) -> Result<Self> {
        let anchors: Vec<&DMatrix<f64>> = members.iter().map(|&i| &uploads[i].intermediate_anchor).collect();
        let alignment = compute_mappings(&anchors, cfg.cutoff)?;
        let reps: Vec<&DMatrix<f64>> = members.iter().map(|&i| &uploads[i].intermediate_train).collect();
        let integrated = integrate(&reps, &alignment.mappings)?;
        let labels: Vec<usize> = members.iter().flat_map(|&i| uploads[i].labels.iter().copied()).collect();
        if labels.is_empty() {
            return Err(Error::Protocol("cluster with an empty integrated training set".into()));
        }

        let ids: Vec<u64> = members.iter().map(|&i| uploads[i].client_id as u64).collect();
        let seed = derive_seed(cfg.seed, &[tag("cluster"), derive_seed(ids.len() as u64, &ids)]);
        let (train_rows, val_rows) = if labels.len() >= 2 {
            stratified_split_indices(&labels, cfg.num_classes, cfg.validation_ratio, derive_seed(seed, &[tag("validation")]))?
        } else {
            (vec![0], Vec::new())
        };
        Ok(Self {
            mappings: alignment.mappings,
            features: integrated.matrix,
            labels,
            train_rows,
            val_rows,
            seed,
        })
    }

    fn integrated_dim(&self) -> usize {
        self.features.ncols()
    }

    fn train_seed(&self, hidden: (usize, usize), stage: &str) -> u64 {
        derive_seed(self.seed, &[tag(stage), hidden.0 as u64, hidden.1 as u64])
    }

    fn validation_accuracy(&self, hidden: (usize, usize), cfg: &AnalystConfig) -> Result<f64> {
        let x = self.features.select_rows(self.train_rows.iter());
        let y: Vec<usize> = self.train_rows.iter().map(|&r| self.labels[r]).collect();
        let model = fit_classifier(&x, &y, hidden, cfg.num_classes, &cfg.train.with_seed(self.train_seed(hidden, "validate")))?;
        let eval_rows = if self.val_rows.is_empty() { &self.train_rows } else { &self.val_rows };
        let xv = self.features.select_rows(eval_rows.iter());
        let yv: Vec<usize> = eval_rows.iter().map(|&r| self.labels[r]).collect();
        model.evaluate(&xv, &yv)
    }

    fn final_model(&self, hidden: (usize, usize), cfg: &AnalystConfig) -> Result<Classifier> {
        fit_classifier(&self.features, &self.labels, hidden, cfg.num_classes, &cfg.train.with_seed(self.train_seed(hidden, "final")))
    }
}

/// Candidate partitions over upload indices, one per threshold.
fn candidate_partitions(uploads: &[Upload], cfg: &AnalystConfig) -> Result<Vec<(Option<f64>, ClusterPartition)>> {
    match cfg.grouping {
        Grouping::SingleCluster => Ok(vec![(None, ClusterPartition::single(uploads.len(), f64::INFINITY))]),
        Grouping::Clustered => {
            let dists = uploads
                .iter()
                .map(|u| label_distribution(&u.labels, cfg.num_classes))
                .collect::<Result<Vec<_>>>()?;
            let d = build_distance_matrix(&dists)?;
            cfg.thresholds
                .iter()
                .map(|&t| Ok((Some(t), complete_linkage_clusters(&d, t)?)))
                .collect()
        }
    }
}

/// Runs the analyst side end to end, using only upload contents.
pub fn analyst_run(uploads: &[Upload], cfg: &AnalystConfig) -> Result<(Vec<Download>, AnalystReport)> {
    cfg.validate()?;
    if uploads.is_empty() {
        return Err(Error::Protocol("no uploads".into()));
    }
    let mut seen = BTreeSet::new();
    for u in uploads {
        u.validate(cfg.num_classes)?;
        if !seen.insert(u.client_id) {
            return Err(Error::Protocol(format!("client {} uploaded twice", u.client_id)));
        }
    }

    let partitions = candidate_partitions(uploads, cfg)?;
    let distinct: BTreeSet<&Vec<usize>> = partitions.iter().flat_map(|(_, p)| p.clusters.iter()).collect();
    let fits: BTreeMap<Vec<usize>, ClusterFit> = distinct
        .into_par_iter()
        .map(|members| Ok((members.clone(), ClusterFit::build(members, uploads, cfg)?)))
        .collect::<Result<_>>()?;

    let jobs: Vec<(&Vec<usize>, (usize, usize))> = fits
        .keys()
        .flat_map(|m| cfg.hidden_candidates.iter().map(move |&h| (m, h)))
        .collect();
    let val_acc: BTreeMap<(Vec<usize>, (usize, usize)), f64> = jobs
        .into_par_iter()
        .map(|(m, h)| Ok(((m.clone(), h), fits[m].validation_accuracy(h, cfg)?)))
        .collect::<Result<_>>()?;

    let mut candidates = Vec::new();
    let mut best: Option<(f64, usize, (usize, usize))> = None;
    for (pi, (t, partition)) in partitions.iter().enumerate() {
        for &h in &cfg.hidden_candidates {
            let mean = partition
                .clusters
                .iter()
                .map(|m| val_acc[&(m.clone(), h)])
                .sum::<f64>()
                / partition.num_clusters() as f64;
            candidates.push(CandidateScore {
                threshold: *t,
                hidden: h,
                num_clusters: partition.num_clusters(),
                mean_validation_accuracy: mean,
            });
            if best.is_none_or(|(b, _, _)| mean > b) {
                best = Some((mean, pi, h));
            }
        }
    }
    let (_, chosen, hidden) = best.expect("at least one candidate");
    let (chosen_t, partition) = &partitions[chosen];

    let models: Vec<Arc<Classifier>> = partition
        .clusters
        .par_iter()
        .map(|m| fits[m].final_model(hidden, cfg).map(Arc::new))
        .collect::<Result<_>>()?;

    let mut downloads: Vec<Option<Download>> = vec![None; uploads.len()];
    let mut per_cluster = Vec::with_capacity(partition.num_clusters());
    for (l, members) in partition.clusters.iter().enumerate() {
        let fit = &fits[members];
        for (pos, &i) in members.iter().enumerate() {
            downloads[i] = Some(Download {
                client_id: uploads[i].client_id,
                cluster_id: l,
                mapping: fit.mappings[pos].clone(),
                model: Arc::clone(&models[l]),
            });
        }
        per_cluster.push(ClusterSummary {
            cluster_id: l,
            members: members.iter().map(|&i| uploads[i].client_id).collect(),
            integrated_dim: fit.integrated_dim(),
            validation_accuracy: val_acc[&(members.clone(), hidden)],
        });
    }

    let to_ids = |v: &Vec<usize>| v.iter().map(|&i| uploads[i].client_id).collect::<Vec<_>>();
    let report = AnalystReport {
        partition: ClusterPartition {
            threshold: partition.threshold,
            clusters: partition.clusters.iter().map(to_ids).collect(),
            merge_log: partition
                .merge_log
                .iter()
                .map(|m| crate::clustering::Merge {
                    left: to_ids(&m.left),
                    right: to_ids(&m.right),
                    distance: m.distance,
                })
                .collect(),
        },
        per_cluster,
        chosen_t: *chosen_t,
        chosen_hidden_sizes: hidden,
        candidates,
    };
    let downloads = downloads.into_iter().map(|d| d.expect("every client covered")).collect();
    Ok((downloads, report))
}

/// Client-side inference: reducer, then mapping, then the cluster model.
pub fn client_infer(reducer: &Reducer, download: &Download, test_features: &DMatrix<f64>) -> Result<Vec<usize>> {
    if reducer.out_dim() != download.mapping.nrows() {
        return Err(Error::shape(format!(
            "reducer emits {} columns, mapping expects {}",
            reducer.out_dim(),
            download.mapping.nrows()
        )));
    }
    if download.mapping.ncols() != download.model.d_in() {
        return Err(Error::shape(format!(
            "mapping emits {} columns, model expects {}",
            download.mapping.ncols(),
            download.model.d_in()
        )));
    }
    if test_features.nrows() == 0 {
        if test_features.ncols() != reducer.in_dim() {
            return Err(Error::shape("test feature width does not match the reducer"));
        }
        return Ok(Vec::new());
    }
    let aligned = apply_reducer(reducer, test_features)? * &download.mapping;
    download.model.predict(&aligned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEvaluation {
    pub per_client: Vec<f64>,
    pub mean: f64,
}

pub fn mean_accuracy(per_client: &[f64]) -> f64 {
    per_client.iter().sum::<f64>() / per_client.len() as f64
}

/// Every client scores its download on its own test rows.
pub fn evaluate_round(shards: &[ClientShard], reducers: &[Reducer], downloads: &[Download]) -> Result<RoundEvaluation> {
    if shards.len() != reducers.len() {
        return Err(Error::shape(format!("{} shards but {} reducers", shards.len(), reducers.len())));
    }
    if shards.is_empty() {
        return Err(Error::invalid("no clients to evaluate"));
    }
    let by_client: BTreeMap<usize, &Download> = downloads.iter().map(|d| (d.client_id, d)).collect();
    let per_client = shards
        .par_iter()
        .zip(reducers.par_iter())
        .map(|(shard, reducer)| {
            let download = by_client
                .get(&shard.client_id)
                .ok_or_else(|| Error::Protocol(format!("no download for client {}", shard.client_id)))?;
            let predicted = client_infer(reducer, download, shard.test.features())?;
            crate::learner::accuracy(&predicted, shard.test.labels())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RoundEvaluation {
        mean: mean_accuracy(&per_client),
        per_client,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Download,
}

/// One transcript line; sizes count 8 bytes per transmitted value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub client_id: usize,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub byte_size: usize,
}

/// In-process message channel that logs every message it carries and
/// refuses a second message in the same direction for the same client.
#[derive(Debug, Default)]
pub struct SimulatedChannel {
    uploads: Vec<Upload>,
    downloads: BTreeMap<usize, Download>,
    uploaded: BTreeSet<usize>,
    downloaded: BTreeSet<usize>,
    transcript: Vec<TranscriptEntry>,
}

impl SimulatedChannel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send_upload(&mut self, upload: Upload) -> Result<()> {
        if !self.uploaded.insert(upload.client_id) {
            return Err(Error::Protocol(format!("client {} already uploaded", upload.client_id)));
        }
        let (n, m) = upload.intermediate_train.shape();
        let r = upload.intermediate_anchor.nrows();
        let shapes = BTreeMap::from([
            ("intermediate_train".to_string(), vec![n, m]),
            ("intermediate_anchor".to_string(), vec![r, upload.intermediate_anchor.ncols()]),
            ("labels".to_string(), vec![upload.labels.len()]),
        ]);
        self.transcript.push(TranscriptEntry {
            direction: Direction::Upload,
            client_id: upload.client_id,
            shapes,
            byte_size: 8 * (n * m + r * upload.intermediate_anchor.ncols() + upload.labels.len()),
        });
        self.uploads.push(upload);
        Ok(())
    }

    /// Hands the analyst everything uploaded so far.
    pub fn take_uploads(&mut self) -> Vec<Upload> {
        std::mem::take(&mut self.uploads)
    }

    pub fn send_download(&mut self, download: Download) -> Result<()> {
        if !self.downloaded.insert(download.client_id) {
            return Err(Error::Protocol(format!("client {} already received a download", download.client_id)));
        }
        let (a, b) = download.mapping.shape();
        let h = download.model.mlp.hidden();
        let shapes = BTreeMap::from([
            ("mapping".to_string(), vec![a, b]),
            (
                "model".to_string(),
                vec![download.model.d_in(), h.0, h.1, download.model.num_classes()],
            ),
        ]);
        self.transcript.push(TranscriptEntry {
            direction: Direction::Download,
            client_id: download.client_id,
            shapes,
            byte_size: 8 * (a * b + download.model.value_count()),
        });
        self.downloads.insert(download.client_id, download);
        Ok(())
    }

    pub fn receive_download(&mut self, client_id: usize) -> Option<Download> {
        self.downloads.remove(&client_id)
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn count(&self, direction: Direction) -> usize {
        self.transcript.iter().filter(|e| e.direction == direction).count()
    }

    pub fn write_transcript(&self, path: impl AsRef<Path>) -> Result<()> {
        write_transcript(&self.transcript, path)
    }
}

/// JSON lines, one message per line.
pub fn write_transcript(entries: &[TranscriptEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Everything one simulated round produces.
#[derive(Debug)]
pub struct RoundOutcome {
    pub reducers: Vec<Reducer>,
    pub downloads: Vec<Download>,
    pub report: AnalystReport,
    pub transcript: Vec<TranscriptEntry>,
    pub evaluation: RoundEvaluation,
}

/// Client preparation for every shard, run in parallel.
pub fn prepare_all(shards: &[ClientShard], anchor: &AnchorData, target_dim: usize) -> Result<(Vec<Reducer>, Vec<Upload>)> {
    let pairs = shards
        .par_iter()
        .map(|s| client_prepare_upload(s, anchor, target_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// One full round: prepare, upload, analyse, download, evaluate.
pub fn run_round(shards: &[ClientShard], anchor: &AnchorData, target_dim: usize, cfg: &AnalystConfig) -> Result<RoundOutcome> {
    let (reducers, uploads) = prepare_all(shards, anchor, target_dim)?;
    run_round_from_uploads(shards, reducers, uploads, cfg)
}

/// Round over already prepared uploads (threshold sweeps reuse them).
pub fn run_round_from_uploads(
    shards: &[ClientShard],
    reducers: Vec<Reducer>,
    uploads: Vec<Upload>,
    cfg: &AnalystConfig,
) -> Result<RoundOutcome> {
    let mut channel = SimulatedChannel::new();
    for u in uploads {
        channel.send_upload(u)?;
    }
    let received = channel.take_uploads();
    let (downloads, report) = analyst_run(&received, cfg)?;
    for d in downloads {
        channel.send_download(d)?;
    }
    let downloads = shards
        .iter()
        .map(|s| {
            channel
                .receive_download(s.client_id)
                .ok_or_else(|| Error::Protocol(format!("no download for client {}", s.client_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let evaluation = evaluate_round(shards, &reducers, &downloads)?;
    Ok(RoundOutcome {
        reducers,
        downloads,
        report,
        transcript: channel.transcript().to_vec(),
        evaluation,
    })
}
