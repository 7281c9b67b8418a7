//! Client clustering from label distributions.
//!
//! Distances are total-variation distances between empirical label
//! distributions; clients are grouped by complete-linkage agglomeration cut
//! at a threshold `t`, so every emitted cluster has diameter at most `t`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Empirical label distribution of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub probs: Vec<f64>,
    pub support_count: usize,
}

impl LabelDistribution {
    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

pub fn label_distribution(labels: &[usize], num_classes: usize) -> Result<LabelDistribution> {
    if labels.is_empty() {
        return Err(Error::invalid("label distribution of an empty label set"));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} outside 0..{num_classes}")));
        }
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    Ok(LabelDistribution {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
        support_count: labels.len(),
    })
}

/// Half the L1 distance between two distributions.
pub fn tv_distance(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    if p.num_classes() != q.num_classes() {
        return Err(Error::shape(format!(
            "distributions over {} and {} classes",
            p.num_classes(),
            q.num_classes()
        )));
    }
    let l1: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * l1).clamp(0.0, 1.0))
}

/// Symmetric `c x c` matrix with zero diagonal and entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: DMatrix<f64>,
}

impl DistanceMatrix {
    /// Validates symmetry, zero diagonal and range.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let c = values.nrows();
        if values.ncols() != c {
            return Err(Error::shape(format!("distance matrix is {}x{}", c, values.ncols())));
        }
        for i in 0..c {
            if values[(i, i)] != 0.0 {
                return Err(Error::invalid(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let d = values[(i, j)];
                if d != values[(j, i)] || !(0.0..=1.0).contains(&d) {
                    return Err(Error::invalid(format!("bad entry ({i}, {j}) = {d}")));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

pub fn build_distance_matrix(dists: &[LabelDistribution]) -> Result<DistanceMatrix> {
    let c = dists.len();
    if c == 0 {
        return Err(Error::invalid("no label distributions"));
    }
    let k = dists[0].num_classes();
    if dists.iter().any(|d| d.num_classes() != k) {
        return Err(Error::shape("label distributions with mixed class counts"));
    }
    let upper: Vec<(usize, usize, f64)> = (0..c)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..c).map(move |j| (i, j, tv_distance(&dists[i], &dists[j]).expect("same K")))
        })
        .collect();
    let mut values = DMatrix::zeros(c, c);
    for (i, j, d) in upper {
        values[(i, j)] = d;
        values[(j, i)] = d;
    }
    Ok(DistanceMatrix { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub distance: f64,
}

/// Disjoint cover of the clients, ordered by smallest member id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub threshold: f64,
    pub clusters: Vec<Vec<usize>>,
    pub merge_log: Vec<Merge>,
}

impl ClusterPartition {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// All clients in one cluster, with no merge history.
    pub fn single(num_clients: usize, threshold: f64) -> Self {
        Self {
            threshold,
            clusters: vec![(0..num_clients).collect()],
            merge_log: Vec::new(),
        }
    }

    /// Cluster index of every client.
    pub fn assignment(&self) -> Vec<usize> {
        let n = self.clusters.iter().map(Vec::len).sum();
        let mut out = vec![usize::MAX; n];
        for (l, members) in self.clusters.iter().enumerate() {
            for &i in members {
                out[i] = l;
            }
        }
        out
    }

    pub fn diameter(&self, d: &DistanceMatrix, cluster: usize) -> f64 {
        let m = &self.clusters[cluster];
        let mut best = 0.0f64;
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                best = best.max(d.get(i, j));
            }
        }
        best
    }
}

/// Complete-linkage agglomeration that merges while the closest pair of
/// clusters is at most `t` apart.
///
/// Ties on the linkage distance go to the pair whose (smaller, larger)
/// representative ids, each cluster represented by its smallest member, is
/// lexicographically smallest.
pub fn complete_linkage_clusters(d: &DistanceMatrix, t: f64) -> Result<ClusterPartition> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::invalid(format!("threshold {t} must be non-negative")));
    }
    let c = d.len();
    let mut clusters: Vec<BTreeSet<usize>> = (0..c).map(|i| BTreeSet::from([i])).collect();
    // linkage[a][b]: farthest-pair distance between live clusters a and b
    let mut linkage: Vec<Vec<f64>> = (0..c).map(|i| (0..c).map(|j| d.get(i, j)).collect()).collect();
    let mut merge_log = Vec::new();

    loop {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let dist = linkage[a][b];
                let ra = *clusters[a].first().expect("non-empty");
                let rb = *clusters[b].first().expect("non-empty");
                let key = (ra.min(rb), ra.max(rb));
                let better = match best {
                    None => true,
                    Some((bd, bk, _, _)) => dist < bd || (dist == bd && key < bk),
                };
                if better {
                    best = Some((dist, key, a, b));
                }
            }
        }
        let Some((dist, _, a, b)) = best else { break };
        if dist > t {
            break;
        }

        merge_log.push(Merge {
            left: clusters[a].iter().copied().collect(),
            right: clusters[b].iter().copied().collect(),
            distance: dist,
        });
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
        let row_b = linkage.remove(b);
        for row in &mut linkage {
            row.remove(b);
        }
        for other in 0..clusters.len() {
            let other_b = if other < b { row_b[other] } else { row_b[other + 1] };
            let merged = linkage[a][other].max(other_b);
            linkage[a][other] = merged;
            linkage[other][a] = merged;
        }
        linkage[a][a] = 0.0;
    }

    let mut out: Vec<Vec<usize>> = clusters.into_iter().map(|s| s.into_iter().collect()).collect();
    out.sort_by_key(|m| m[0]);
    Ok(ClusterPartition {
        threshold: t,
        clusters: out,
        merge_log,
    })
}
