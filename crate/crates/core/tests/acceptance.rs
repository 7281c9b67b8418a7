//! Acceptance gate. Prints one PASS/FAIL line per criterion.
//!
//! Dataset-backed criteria read CSVs from `DCCFL_DRY_BEAN_CSV` and
//! `DCCFL_COVERTYPE_CSV` (default `data/dry_bean.csv` and
//! `data/covertype.csv` under the workspace root). When a file is missing the
//! criterion is reported as a blocked FAIL; set `DCCFL_REQUIRE_DATASETS=1` to
//! make blocked criteria fail the process as well.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dccfl::alignment::{alignment_objective, compute_mappings, pseudoinverse, SingularCutoff, DEFAULT_PINV_TOL};
use dccfl::clustering::{complete_linkage_clusters, tv_distance, DistanceMatrix, LabelDistribution};
use dccfl::dataset::{gaussian_blobs, load_dataset, LabeledTable, PartitionSpec};
use dccfl::harness::{
    run_method_on_table, sweep_threshold, DatasetConfig, ExperimentConfig, Method, ResultRecord,
};
use dccfl::learner::{accuracy, grad_check, init_mlp, predict, train, TrainConfig};
use dccfl::protocol::{run_round, AnalystConfig, Direction};
use dccfl::reduction::generate_anchor;

// Reference accuracies for the Dry Bean C=2 setting.
const DRY_BEAN_DCCFL: f64 = 0.9861;
const DRY_BEAN_LOCAL: f64 = 0.9805;
const DRY_BEAN_DC: f64 = 0.9156;
const DRY_BEAN_ABS_TOL: f64 = 0.03;
const DRY_BEAN_MIN_DCCFL: f64 = 0.95;
const COVERTYPE_MIN_GAP: f64 = 0.04;
const SWEEP_MIN_SPREAD: f64 = 0.02;
const PROJECTION_REL_TOL: f64 = 1e-6;
const PENROSE_TOL: f64 = 1e-6;
const GRAD_CHECK_TOL: f64 = 1e-4;
const BLOB_MIN_TRAIN_ACC: f64 = 0.99;

type Criterion = fn() -> Outcome;

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

fn workspace_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn dataset_from_env(var: &str, default: &str, label_var: &str, default_label: &str) -> Result<LabeledTable, String> {
    let path = std::env::var(var).map(PathBuf::from).unwrap_or_else(|_| workspace_path(default));
    if !path.exists() {
        return Err(format!("{} not found (set {var})", path.display()));
    }
    let label = std::env::var(label_var).unwrap_or_else(|_| default_label.to_string());
    load_dataset(&path, &label, None).map_err(|e| format!("{}: {e}", path.display()))
}

fn dry_bean() -> Result<LabeledTable, String> {
    dataset_from_env("DCCFL_DRY_BEAN_CSV", "data/dry_bean.csv", "DCCFL_DRY_BEAN_LABEL", "Class")
}

fn covertype() -> Result<LabeledTable, String> {
    dataset_from_env("DCCFL_COVERTYPE_CSV", "data/covertype.csv", "DCCFL_COVERTYPE_LABEL", "Cover_Type")
}

fn config(name: &str, partition: PartitionSpec, method: Method, runs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        DatasetConfig {
            path: PathBuf::from(name),
            label_column: String::new(),
            num_classes: None,
            name: Some(name.to_string()),
        },
        partition,
        method,
    );
    cfg.num_runs = runs;
    cfg
}

fn mean_over_runs(records: &[ResultRecord]) -> f64 {
    records.iter().map(|r| r.mean_accuracy).sum::<f64>() / records.len() as f64
}

fn dry_bean_ordering() -> Outcome {
    let table = match dry_bean() {
        Ok(t) => t,
        Err(e) => return Outcome::Blocked(e),
    };
    let mut means = Vec::new();
    for method in [Method::DcCfl, Method::Local, Method::Dc] {
        let cfg = config("dry_bean", PartitionSpec::class_based(100, 2, 0), method, 10);
        match run_method_on_table(&cfg, &table, "dry_bean") {
            Ok(r) => means.push(mean_over_runs(&r)),
            Err(e) => return Outcome::Fail(format!("{} failed: {e}", method.as_str())),
        }
    }
    let (dccfl, local, dc) = (means[0], means[1], means[2]);
    let close = (dccfl - DRY_BEAN_DCCFL).abs() <= DRY_BEAN_ABS_TOL
        && (local - DRY_BEAN_LOCAL).abs() <= DRY_BEAN_ABS_TOL
        && (dc - DRY_BEAN_DC).abs() <= DRY_BEAN_ABS_TOL;
    check(
        dccfl >= DRY_BEAN_MIN_DCCFL && dccfl > local && local > dc && close,
        format!("dc_cfl {dccfl:.4} local {local:.4} dc {dc:.4}"),
    )
}

fn covertype_gap() -> Outcome {
    let table = match covertype() {
        Ok(t) => t,
        Err(e) => return Outcome::Blocked(e),
    };
    let mut means = Vec::new();
    for method in [Method::DcCfl, Method::Local] {
        let cfg = config("covertype", PartitionSpec::class_based(100, 3, 0), method, 10);
        match run_method_on_table(&cfg, &table, "covertype") {
            Ok(r) => means.push(mean_over_runs(&r)),
            Err(e) => return Outcome::Fail(format!("{} failed: {e}", method.as_str())),
        }
    }
    let gap = means[0] - means[1];
    check(
        gap >= COVERTYPE_MIN_GAP,
        format!("dc_cfl {:.4} local {:.4} gap {gap:.4}", means[0], means[1]),
    )
}

fn covertype_sweep() -> Outcome {
    let table = match covertype() {
        Ok(t) => t,
        Err(e) => return Outcome::Blocked(e),
    };
    let ts: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for k in [2, 3] {
        let cfg = config("covertype", PartitionSpec::class_based(100, k, 0), Method::DcCfl, 10);
        let rows = match sweep_threshold(&cfg, &table, &ts) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("C={k} sweep failed: {e}")),
        };
        let accs: Vec<f64> = rows.iter().map(|r| r.mean_test_accuracy).collect();
        let spread = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - accs.iter().cloned().fold(f64::INFINITY, f64::min);
        ok &= spread >= SWEEP_MIN_SPREAD;
        detail.push(format!("C={k} spread {spread:.4}"));
    }
    check(ok, detail.join(", "))
}

fn threshold_one_matches_dc() -> Outcome {
    let table = gaussian_blobs(250, 6, 4, 3.0, 11).expect("blobs");
    assert_eq!(table.n_rows(), 1000);
    let mut dc = config("synthetic", PartitionSpec::class_based(10, 2, 0), Method::Dc, 5);
    dc.seed = 3;
    let base = match run_method_on_table(&dc, &table, "synthetic") {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("dc failed: {e}")),
    };
    for t in [1.0, 1.5] {
        let mut cfl = dc.clone();
        cfl.method = Method::DcCfl;
        cfl.thresholds = vec![t];
        let forced = match run_method_on_table(&cfl, &table, "synthetic") {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("dc_cfl failed: {e}")),
        };
        for (a, b) in forced.iter().zip(&base) {
            if a.seed != b.seed || a.per_client != b.per_client || a.mean_accuracy != b.mean_accuracy {
                return Outcome::Fail(format!("t={t} seed {} differs: {} vs {}", a.seed, a.mean_accuracy, b.mean_accuracy));
            }
        }
    }
    check(true, format!("5 seeds, t in {{1.0, 1.5}}, mean {:.4}", mean_over_runs(&base)))
}

/// Projector onto the column space of a full-column-rank matrix via QR.
fn qr_projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    let q = a.clone().qr().q();
    &q * q.transpose()
}

fn alignment_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_identity = 0.0f64;
    let mut worst_drop = f64::NEG_INFINITY;
    for _ in 0..50 {
        let r = rng.random_range(20..=100);
        let c = rng.random_range(1..=5);
        let latent_dim = rng.random_range(3..=8);
        let latent = gaussian(r, latent_dim, &mut rng);
        let reps: Vec<DMatrix<f64>> = (0..c)
            .map(|_| {
                let d = rng.random_range(2..=latent_dim);
                &latent * gaussian(latent_dim, d, &mut rng) + 0.01 * gaussian(r, d, &mut rng)
            })
            .collect();
        let refs: Vec<&DMatrix<f64>> = reps.iter().collect();
        let result = match compute_mappings(&refs, SingularCutoff::default()) {
            Ok(res) => res,
            Err(e) => return Outcome::Fail(format!("alignment failed: {e}")),
        };
        let z = &result.common_rep;
        for (x, g) in reps.iter().zip(&result.mappings) {
            let resid = (x * g - qr_projector(x) * z).norm() / z.norm();
            worst_identity = worst_identity.max(resid);
        }
        let base = alignment_objective(&refs, z, &result.mappings);
        for _ in 0..100 {
            let mut perturbed = result.mappings.clone();
            let i = rng.random_range(0..c);
            let scale = 10f64.powf(rng.random_range(-3.0..0.0));
            let (rows, cols) = perturbed[i].shape();
            perturbed[i] += scale * gaussian(rows, cols, &mut rng);
            let moved = alignment_objective(&refs, z, &perturbed);
            worst_drop = worst_drop.max(base - moved - 1e-12 * (1.0 + base));
        }
    }
    check(
        worst_identity <= PROJECTION_REL_TOL && worst_drop <= 0.0,
        format!("max projection residual {worst_identity:.2e}, objective never decreased: {}", worst_drop <= 0.0),
    )
}

fn penrose_residual(a: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let ax = a * x;
    let xa = x * a;
    [
        (&ax * a - a).norm(),
        (&xa * x - x).norm(),
        (&ax - ax.transpose()).norm(),
        (&xa - xa.transpose()).norm(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn pseudoinverse_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut kinds = [0usize; 3];
    for i in 0..100 {
        let rows = rng.random_range(1..=15);
        let cols = rng.random_range(1..=15);
        let a = match i % 5 {
            0 => {
                kinds[0] += 1;
                DMatrix::zeros(rows, cols)
            }
            1 | 2 if rows.min(cols) > 1 => {
                kinds[1] += 1;
                let k = rng.random_range(1..rows.min(cols));
                gaussian(rows, k, &mut rng) * gaussian(k, cols, &mut rng)
            }
            _ => {
                kinds[2] += 1;
                gaussian(rows, cols, &mut rng)
            }
        };
        let x = pseudoinverse(&a, DEFAULT_PINV_TOL);
        if x.shape() != (cols, rows) {
            return Outcome::Fail(format!("pinv of {rows}x{cols} has shape {:?}", x.shape()));
        }
        worst = worst.max(penrose_residual(&a, &x));
    }
    check(
        worst <= PENROSE_TOL,
        format!(
            "max residual {worst:.2e} over {} zero, {} rank-deficient, {} generic",
            kinds[0], kinds[1], kinds[2]
        ),
    )
}

fn random_distribution(k: usize, rng: &mut ChaCha8Rng) -> LabelDistribution {
    let counts: Vec<u32> = loop {
        let c: Vec<u32> = (0..k).map(|_| if rng.random_bool(0.4) { 0 } else { rng.random_range(1..6) }).collect();
        if c.iter().any(|&v| v > 0) {
            break c;
        }
    };
    let total: u32 = counts.iter().sum();
    LabelDistribution {
        probs: counts.iter().map(|&v| v as f64 / total as f64).collect(),
        support_count: counts.iter().filter(|&&v| v > 0).count(),
    }
}

/// All set partitions of `0..n`, via restricted growth strings.
fn all_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    fn grow(i: usize, n: usize, rgs: &mut Vec<usize>, out: &mut Vec<Vec<Vec<usize>>>) {
        if i == n {
            let blocks = rgs.iter().max().map_or(0, |m| m + 1);
            let mut p = vec![Vec::new(); blocks];
            for (item, &b) in rgs.iter().enumerate() {
                p[b].push(item);
            }
            out.push(p);
            return;
        }
        let limit = rgs.iter().max().map_or(0, |m| m + 1);
        for b in 0..=limit {
            rgs.push(b);
            grow(i + 1, n, rgs, out);
            rgs.pop();
        }
    }
    let mut out = Vec::new();
    grow(0, n, &mut Vec::new(), &mut out);
    out
}

fn canonical(mut p: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for b in &mut p {
        b.sort_unstable();
    }
    p.sort();
    p
}

fn clustering_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let partitions: Vec<Vec<Vec<Vec<usize>>>> = (0..=6).map(all_partitions).collect();
    for trial in 0..200 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(2..=5);
        let dists: Vec<LabelDistribution> = (0..n).map(|_| random_distribution(k, &mut rng)).collect();
        let values = DMatrix::from_fn(n, n, |i, j| 0.5 * dists[i].probs.iter().zip(&dists[j].probs).map(|(a, b)| (a - b).abs()).sum::<f64>());
        let d = DistanceMatrix::new(values.clone()).expect("valid distance matrix");
        let t = if trial % 2 == 0 { rng.random_range(1..=9) as f64 / 10.0 } else { rng.random_range(0.0..1.0) };
        let emitted = match complete_linkage_clusters(&d, t) {
            Ok(p) => canonical(p.clusters),
            Err(e) => return Outcome::Fail(format!("trial {trial}: {e}")),
        };
        let diameter = |b: &[usize]| b.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| values[(i, j)]).fold(0.0, f64::max);
        let feasible: Vec<Vec<Vec<usize>>> = partitions[n]
            .iter()
            .filter(|p| p.iter().all(|b| diameter(b) <= t))
            .cloned()
            .map(canonical)
            .collect();
        if !feasible.contains(&emitted) {
            return Outcome::Fail(format!("trial {trial}: {emitted:?} is not a partition with diameter <= {t}"));
        }
        for (a, ba) in emitted.iter().enumerate() {
            for bb in &emitted[a + 1..] {
                let link = ba.iter().flat_map(|&i| bb.iter().map(move |&j| (i, j))).map(|(i, j)| values[(i, j)]).fold(0.0, f64::max);
                if link <= t {
                    return Outcome::Fail(format!("trial {trial}: clusters {ba:?} and {bb:?} still mergeable at {t}"));
                }
            }
        }
    }

    for trial in 0..1000 {
        let k = rng.random_range(2..=8);
        let p = random_distribution(k, &mut rng);
        let q = random_distribution(k, &mut rng);
        let r = random_distribution(k, &mut rng);
        let d = |a: &LabelDistribution, b: &LabelDistribution| tv_distance(a, b).expect("same support size");
        let (pq, qp, qr, pr) = (d(&p, &q), d(&q, &p), d(&q, &r), d(&p, &r));
        // sup over events of |P(A) - Q(A)|
        let sup = (0u32..1 << k)
            .map(|mask| (0..k).filter(|i| mask >> i & 1 == 1).map(|i| p.probs[i] - q.probs[i]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        let disjoint = p.probs.iter().zip(&q.probs).all(|(a, b)| *a == 0.0 || *b == 0.0);
        let ok = (0.0..=1.0).contains(&pq)
            && d(&p, &p) == 0.0
            && pq == qp
            && pr <= pq + qr + 1e-12
            && (pq - sup).abs() <= 1e-12
            && (!disjoint || (pq - 1.0).abs() <= 1e-12);
        if !ok {
            return Outcome::Fail(format!("TV axiom violated in trial {trial}: {pq} {qp} {qr} {pr} sup {sup}"));
        }
    }
    check(true, "200 linkage trials against exhaustive partitions, 1000 TV triples".into())
}

fn learner_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let d_in = rng.random_range(2..=8);
        let hidden = (rng.random_range(2..=10), rng.random_range(2..=10));
        let k = rng.random_range(2..=5);
        let n = rng.random_range(4..=16);
        let mut params = init_mlp(d_in, hidden, k, 100 + i).expect("init");
        // zero biases put dead-layer rows exactly on a ReLU kink
        for b in [&mut params.b1, &mut params.b2, &mut params.b3] {
            b.apply(|v| *v = 0.1 * normal(&mut rng));
        }
        let x = gaussian(n, d_in, &mut rng);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        match grad_check(&params, &x, &y, 1e-6) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return Outcome::Fail(format!("grad_check failed: {e}")),
        }
    }

    let blobs = gaussian_blobs(100, 4, 3, 8.0, 9).expect("blobs");
    // nearest centroid is a linear rule, so perfect accuracy certifies separability
    let centroids: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let rows: Vec<usize> = (0..blobs.n_rows()).filter(|&i| blobs.labels()[i] == c).collect();
            (0..4).map(|j| rows.iter().map(|&i| blobs.features()[(i, j)]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    let separable = (0..blobs.n_rows()).all(|i| {
        let row = blobs.features().row(i);
        let nearest = (0..3)
            .min_by(|&a, &b| {
                let da: f64 = (0..4).map(|j| (row[j] - centroids[a][j]).powi(2)).sum();
                let db: f64 = (0..4).map(|j| (row[j] - centroids[b][j]).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        nearest == blobs.labels()[i]
    });
    let cfg = TrainConfig::default().with_seed(4);
    let trained = init_mlp(4, (64, 32), 3, 4).and_then(|p| train(p, blobs.features(), blobs.labels(), &cfg));
    let train_acc = match trained.and_then(|p| accuracy(&predict(&p, blobs.features())?, blobs.labels())) {
        Ok(a) => a,
        Err(e) => return Outcome::Fail(format!("blob training failed: {e}")),
    };
    check(
        worst < GRAD_CHECK_TOL && separable && train_acc >= BLOB_MIN_TRAIN_ACC,
        format!("max grad rel err {worst:.2e}, separable blobs train acc {train_acc:.4} after {} epochs", cfg.epochs),
    )
}

fn single_round_transcript() -> Outcome {
    let m = 8;
    let table = gaussian_blobs(120, m, 5, 3.0, 12).expect("blobs");
    let (lo, hi) = table.feature_bounds();
    let anchor = generate_anchor(&lo, &hi, 200, 1).expect("anchor");
    let settings = [
        PartitionSpec::class_based(1, 5, 1),
        PartitionSpec::class_based(6, 2, 2),
        PartitionSpec::class_based(15, 3, 3),
        PartitionSpec::dirichlet(10, 0.1, 4),
    ];
    for spec in settings {
        let shards = dccfl::dataset::partition(&table, &spec).expect("partition");
        let c = shards.len();
        let mut acfg = AnalystConfig::new(5);
        acfg.train.epochs = 5;
        let outcome = match run_round(&shards, &anchor, m - 1, &acfg) {
            Ok(o) => o,
            Err(e) => return Outcome::Fail(format!("{}: {e}", spec.descriptor())),
        };
        let uploads: Vec<_> = outcome.transcript.iter().filter(|e| e.direction == Direction::Upload).collect();
        let downloads = outcome.transcript.len() - uploads.len();
        let mut clients: Vec<usize> = uploads.iter().map(|e| e.client_id).collect();
        clients.sort_unstable();
        clients.dedup();
        let wide = uploads.iter().flat_map(|e| e.shapes.values()).any(|s| s.len() == 2 && s[1] == m);
        if uploads.len() != c || downloads != c || clients.len() != c || wide {
            return Outcome::Fail(format!(
                "{} with c={c}: {} uploads, {downloads} downloads, m-wide upload rows: {wide}",
                spec.descriptor(),
                uploads.len()
            ));
        }
    }
    check(true, "c uploads and c downloads for c in {1, 6, 15, 10}, no m-wide upload rows".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 9] = [
        ("1 dry bean C=2 ordering", dry_bean_ordering),
        ("2 covertype C=3 gap over local", covertype_gap),
        ("3 covertype threshold sensitivity", covertype_sweep),
        ("4 t>=1 equals single-cluster baseline", threshold_one_matches_dc),
        ("5 alignment projection and optimality", alignment_properties),
        ("6 pseudoinverse Penrose conditions", pseudoinverse_properties),
        ("7 complete linkage and TV metric", clustering_properties),
        ("8 gradient check and separable blobs", learner_properties),
        ("9 single-round transcript", single_round_transcript),
    ];
    let strict = std::env::var("DCCFL_REQUIRE_DATASETS").is_ok_and(|v| v == "1");
    let mut failed = false;
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("PASS  criterion {name}: {d} ({secs:.1}s)"),
            Outcome::Fail(d) => {
                failed = true;
                println!("FAIL  criterion {name}: {d} ({secs:.1}s)");
            }
            Outcome::Blocked(d) => {
                failed |= strict;
                println!("FAIL  criterion {name}: blocked, {d}");
            }
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
