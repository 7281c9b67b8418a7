//! Tabular classification data and non-IID client partitioning.
//!
//! A [`LabeledTable`] is the raw `(X, y)` pair a client holds. The two
//! partitioners produce label-skewed client shards:
//!
//! - class-based (`C = k`): every client holds samples of exactly `k` classes;
//! - Dirichlet (`Dir(alpha)`): per-class allocation proportions over clients
//!   are drawn from a symmetric Dirichlet distribution.
//!
//! Both partitioners assign every input row to exactly one client and are
//! deterministic for a fixed seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from, tag};

/// Feature matrix plus integer labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTable {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledTable {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::InvalidTable(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidTable("num_classes must be positive".into()));
        }
        if features.ncols() < 2 {
            return Err(Error::InvalidTable(format!(
                "need at least 2 feature columns, got {}",
                features.ncols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidTable(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// New table holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> LabeledTable {
        LabeledTable {
            features: self.features.select_rows(rows.iter()),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Row indices grouped by class.
    fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (row, &y) in self.labels.iter().enumerate() {
            by_class[y].push(row);
        }
        by_class
    }

    /// Per-feature `(min, max)` over all rows.
    pub fn feature_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self
            .features
            .column_iter()
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let hi = self
            .features
            .column_iter()
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        (lo, hi)
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: LabeledTable,
    pub test: LabeledTable,
}

impl ClientShard {
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = self.train.class_counts();
        for (slot, n) in h.iter_mut().zip(self.test.class_counts()) {
            *slot += n;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    ClassBased { classes_per_client: usize },
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub kind: PartitionKind,
    pub num_clients: usize,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
    #[serde(default = "default_test_ratio")]
    pub test_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_samples() -> usize {
    20
}

fn default_test_ratio() -> f64 {
    0.2
}

impl PartitionSpec {
    pub fn class_based(num_clients: usize, classes_per_client: usize, seed: u64) -> Self {
        Self {
            kind: PartitionKind::ClassBased { classes_per_client },
            num_clients,
            min_samples: default_min_samples(),
            test_ratio: default_test_ratio(),
            seed,
        }
    }

    pub fn dirichlet(num_clients: usize, alpha: f64, seed: u64) -> Self {
        Self {
            kind: PartitionKind::Dirichlet { alpha },
            num_clients,
            min_samples: default_min_samples(),
            test_ratio: default_test_ratio(),
            seed,
        }
    }

    /// Short label such as `C=2` or `Dir(0.1)`.
    pub fn descriptor(&self) -> String {
        match self.kind {
            PartitionKind::ClassBased { classes_per_client } => format!("C={classes_per_client}"),
            PartitionKind::Dirichlet { alpha } => format!("Dir({alpha})"),
        }
    }

    /// Smallest client size whose train split still has `min_samples` rows.
    fn min_client_rows(&self) -> usize {
        (self.min_samples..)
            .find(|&n| n - test_count(n, self.test_ratio) >= self.min_samples)
            .unwrap_or(self.min_samples)
    }

    fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::invalid("num_clients must be positive"));
        }
        if !(self.test_ratio > 0.0 && self.test_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "test_ratio {} outside (0, 1)",
                self.test_ratio
            )));
        }
        Ok(())
    }
}

/// Reads a CSV with a header row. The label column may hold any values; they
/// are remapped to `0..K` in sorted order (numeric order when every label
/// parses as a number). All other columns must be numeric.
pub fn load_dataset(
    path: impl AsRef<Path>,
    label_column: &str,
    num_classes: Option<usize>,
) -> Result<LabeledTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    let label_idx = header
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::UnknownLabelColumn(label_column.to_string()))?;
    let feature_names: Vec<&str> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h)
        .collect();

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let col = if i < label_idx { i } else { i - 1 };
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumeric {
                column: feature_names.get(col).unwrap_or(&"?").to_string(),
                row,
                value: cell.to_string(),
            })?;
            values.push(v);
        }
    }

    let (labels, distinct) = remap_labels(&raw_labels);
    if distinct < 2 {
        return Err(Error::TooFewClasses(distinct));
    }
    let num_classes = match num_classes {
        Some(k) if k < distinct => {
            return Err(Error::InvalidTable(format!(
                "num_classes {k} but {distinct} distinct labels"
            )))
        }
        Some(k) => k,
        None => distinct,
    };
    let features = DMatrix::from_row_slice(labels.len(), feature_names.len(), &values);
    LabeledTable::new(features, labels, num_classes)
}

fn remap_labels(raw: &[String]) -> (Vec<usize>, usize) {
    let numeric: Option<Vec<f64>> = raw.iter().map(|s| s.parse::<f64>().ok()).collect();
    let mut distinct: Vec<&String> = raw.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if let Some(nums) = numeric {
        let value: BTreeMap<&String, f64> = raw.iter().zip(nums).collect();
        distinct.sort_by(|a, b| value[a].total_cmp(&value[b]));
    }
    let index: BTreeMap<&String, usize> = distinct.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    (raw.iter().map(|s| index[s]).collect(), distinct.len())
}

/// Number of test rows for a client with `n` rows.
fn test_count(n: usize, ratio: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
}

/// Stratified split of row indices into (train, test), both sorted.
///
/// Per-class test quotas use largest remainders so the total test count is
/// `round(n * ratio)`; a class keeps at least one training row when the
/// total allows it.
fn stratified_indices<R: Rng>(labels: &[usize], num_classes: usize, ratio: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let target = test_count(n, ratio);
    let mut by_class = vec![Vec::new(); num_classes];
    for (row, &y) in labels.iter().enumerate() {
        by_class[y].push(row);
    }

    let quota: Vec<f64> = by_class.iter().map(|rows| rows.len() as f64 * ratio).collect();
    let mut take: Vec<usize> = by_class
        .iter()
        .zip(&quota)
        .map(|(rows, q)| (q.floor() as usize).min(rows.len().saturating_sub(1)))
        .collect();
    let mut assigned: usize = take.iter().sum();

    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let fa = quota[a] - quota[a].floor();
        let fb = quota[b] - quota[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    // First honour the keep-one-in-train cap, then relax it if needed.
    for relax in [false, true] {
        let mut progressed = true;
        while assigned < target && progressed {
            progressed = false;
            for &k in &order {
                let cap = if relax { by_class[k].len() } else { by_class[k].len().saturating_sub(1) };
                if assigned < target && take[k] < cap {
                    take[k] += 1;
                    assigned += 1;
                    progressed = true;
                }
            }
        }
    }
    debug_assert_eq!(assigned, target);

    let mut train = Vec::with_capacity(n - target);
    let mut test = Vec::with_capacity(target);
    for (k, rows) in by_class.iter_mut().enumerate() {
        rows.shuffle(rng);
        test.extend_from_slice(&rows[..take[k]]);
        train.extend_from_slice(&rows[take[k]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Stratified split of row indices by label; returns sorted (train, test).
pub fn stratified_split_indices(labels: &[usize], num_classes: usize, test_ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_ratio > 0.0 && test_ratio < 1.0) {
        return Err(Error::invalid(format!("test_ratio {test_ratio} outside (0, 1)")));
    }
    Ok(stratified_indices(labels, num_classes, test_ratio, &mut rng_from(seed)))
}

/// Stratified train/test split; deterministic for a fixed seed.
pub fn split_train_test(table: &LabeledTable, test_ratio: f64, seed: u64) -> Result<(LabeledTable, LabeledTable)> {
    let (train, test) = stratified_split_indices(table.labels(), table.num_classes(), test_ratio, seed)?;
    Ok((table.select_rows(&train), table.select_rows(&test)))
}

/// Per-client row assignment for the class-based split.
///
/// A round-robin list of `c * k` class slots is shuffled and dealt `k` per
/// client; duplicate classes within a client are repaired by swapping slots
/// with another client. Each class's rows are then divided as evenly as
/// possible among its holders.
pub fn class_based_assignment(table: &LabeledTable, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let k = match spec.kind {
        PartitionKind::ClassBased { classes_per_client } => classes_per_client,
        PartitionKind::Dirichlet { .. } => return Err(Error::invalid("expected a class-based partition")),
    };
    let n_classes = table.num_classes();
    let c = spec.num_clients;
    if k == 0 || k > n_classes {
        return Err(Error::invalid(format!(
            "classes_per_client {k} outside 1..={n_classes}"
        )));
    }
    let by_class = table.rows_by_class();
    if c * k < n_classes {
        return Err(Error::InfeasiblePartition(format!(
            "{c} clients x {k} classes cannot cover {n_classes} classes"
        )));
    }

    let mut rng = rng_from(derive_seed(spec.seed, &[tag("class-slots")]));
    let mut slots: Vec<usize> = (0..c * k).map(|p| p % n_classes).collect();
    slots.shuffle(&mut rng);
    repair_duplicate_slots(&mut slots, k, &mut rng)?;

    let mut holders = vec![Vec::new(); n_classes];
    for (client, chunk) in slots.chunks(k).enumerate() {
        for &class in chunk {
            holders[class].push(client);
        }
    }

    let mut assignment = vec![Vec::new(); c];
    for (class, rows) in by_class.into_iter().enumerate() {
        let owners = &holders[class];
        if rows.len() < owners.len() {
            return Err(Error::InfeasiblePartition(format!(
                "class {class} has {} rows for {} holders",
                rows.len(),
                owners.len()
            )));
        }
        let mut rows = rows;
        let mut class_rng = rng_from(derive_seed(spec.seed, &[tag("class-rows"), class as u64]));
        rows.shuffle(&mut class_rng);
        for (owner, part) in owners.iter().zip(even_chunks(&rows, owners.len())) {
            assignment[*owner].extend_from_slice(part);
        }
    }
    for rows in &mut assignment {
        rows.sort_unstable();
    }
    check_min_rows(&assignment, spec)?;
    Ok(assignment)
}

fn repair_duplicate_slots<R: Rng>(slots: &mut [usize], k: usize, rng: &mut R) -> Result<()> {
    let c = slots.len() / k;
    let has = |slots: &[usize], client: usize, class: usize, skip: usize| {
        (client * k..client * k + k).any(|p| p != skip && slots[p] == class)
    };
    for client in 0..c {
        for pos in client * k..client * k + k {
            if !has(slots, client, slots[pos], pos) {
                continue;
            }
            let mut candidates: Vec<usize> = (0..slots.len()).filter(|p| p / k != client).collect();
            candidates.shuffle(rng);
            let swap = candidates.into_iter().find(|&q| {
                let other = q / k;
                !has(slots, client, slots[q], pos) && !has(slots, other, slots[pos], q)
            });
            match swap {
                Some(q) => slots.swap(pos, q),
                None => {
                    return Err(Error::InfeasiblePartition(format!(
                        "cannot give client {client} {k} distinct classes"
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
fn even_chunks<T>(items: &[T], parts: usize) -> Vec<&[T]> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

fn check_min_rows(assignment: &[Vec<usize>], spec: &PartitionSpec) -> Result<()> {
    let need = spec.min_client_rows();
    if let Some((client, rows)) = assignment.iter().enumerate().find(|(_, r)| r.len() < need) {
        return Err(Error::InfeasiblePartition(format!(
            "client {client} has {} rows, needs {need} for {} training rows",
            rows.len(),
            spec.min_samples
        )));
    }
    Ok(())
}

/// One draw from a symmetric Dirichlet over `c` clients.
pub fn dirichlet_proportions<R: Rng>(alpha: f64, c: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..c).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / c as f64; c]
    }
}

/// Integer counts summing to `n` from proportions, by largest remainder.
fn apportion(props: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

const DIRICHLET_ATTEMPTS: usize = 100;

/// Per-client row assignment for the Dirichlet split.
///
/// Re-draws up to 100 times until every client reaches the size floor, then
/// tops up deficient clients from the largest ones.
pub fn dirichlet_assignment(table: &LabeledTable, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let alpha = match spec.kind {
        PartitionKind::Dirichlet { alpha } => alpha,
        PartitionKind::ClassBased { .. } => return Err(Error::invalid("expected a Dirichlet partition")),
    };
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha {alpha} must be positive")));
    }
    let c = spec.num_clients;
    let need = spec.min_client_rows();
    if table.n_rows() < c * need {
        return Err(Error::InfeasiblePartition(format!(
            "{} rows cannot give {c} clients {need} rows each",
            table.n_rows()
        )));
    }

    let by_class = table.rows_by_class();
    let mut rng = rng_from(derive_seed(spec.seed, &[tag("dirichlet")]));
    let mut assignment = Vec::new();
    for _ in 0..DIRICHLET_ATTEMPTS {
        assignment = vec![Vec::new(); c];
        for rows in &by_class {
            let props = dirichlet_proportions(alpha, c, &mut rng);
            let counts = apportion(&props, rows.len());
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            let mut start = 0;
            for (client, n) in counts.into_iter().enumerate() {
                assignment[client].extend_from_slice(&rows[start..start + n]);
                start += n;
            }
        }
        if assignment.iter().all(|r| r.len() >= need) {
            break;
        }
    }

    while let Some(poor) = assignment.iter().position(|r| r.len() < need) {
        let donor = (0..c)
            .max_by(|&a, &b| assignment[a].len().cmp(&assignment[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let pick = rng.random_range(0..assignment[donor].len());
        let row = assignment[donor].swap_remove(pick);
        assignment[poor].push(row);
    }
    for rows in &mut assignment {
        rows.sort_unstable();
    }
    Ok(assignment)
}

fn shards_from_assignment(table: &LabeledTable, assignment: &[Vec<usize>], spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    assignment
        .iter()
        .enumerate()
        .map(|(client, rows)| {
            let local = table.select_rows(rows);
            let (train, test) = split_train_test(
                &local,
                spec.test_ratio,
                derive_seed(spec.seed, &[tag("client-split"), client as u64]),
            )?;
            Ok(ClientShard {
                client_id: client,
                train,
                test,
            })
        })
        .collect()
}

pub fn partition_class_based(table: &LabeledTable, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let assignment = class_based_assignment(table, spec)?;
    shards_from_assignment(table, &assignment, spec)
}

pub fn partition_dirichlet(table: &LabeledTable, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let assignment = dirichlet_assignment(table, spec)?;
    shards_from_assignment(table, &assignment, spec)
}

pub fn partition(table: &LabeledTable, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    match spec.kind {
        PartitionKind::ClassBased { .. } => partition_class_based(table, spec),
        PartitionKind::Dirichlet { .. } => partition_dirichlet(table, spec),
    }
}

/// Isotropic Gaussian blobs: class centres drawn from `N(0, center_scale^2)`
/// per feature, samples from `N(centre, 1)`.
pub fn gaussian_blobs(
    n_per_class: usize,
    n_features: usize,
    num_classes: usize,
    center_scale: f64,
    seed: u64,
) -> Result<LabeledTable> {
    let mut rng = rng_from(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..n_features)
                .map(|_| center_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let n = n_per_class * num_classes;
    let mut features = DMatrix::zeros(n, n_features);
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let class = row % num_classes;
        for j in 0..n_features {
            features[(row, j)] = centers[class][j] + rng.sample::<f64, _>(StandardNormal);
        }
        labels.push(class);
    }
    LabeledTable::new(features, labels, num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifestEntry {
    pub client_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub label_histogram: Vec<usize>,
}

/// Writes `client_<id>.csv` per shard plus `manifest.json` into `dir`.
pub fn write_shards(dir: impl AsRef<Path>, shards: &[ClientShard]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(shards.len());
    for shard in shards {
        let path = dir.join(format!("client_{}.csv", shard.client_id));
        let mut w = csv::Writer::from_path(&path)?;
        let m = shard.train.n_features();
        let mut header: Vec<String> = (0..m).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header)?;
        for (split, table) in [("train", &shard.train), ("test", &shard.test)] {
            for (row, &y) in table.labels().iter().enumerate() {
                let mut rec: Vec<String> = table.features().row(row).iter().map(|v| v.to_string()).collect();
                rec.push(y.to_string());
                rec.push(split.to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        manifest.push(ShardManifestEntry {
            client_id: shard.client_id,
            n_train: shard.train.n_rows(),
            n_test: shard.test.n_rows(),
            label_histogram: shard.label_histogram(),
        });
    }
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}
