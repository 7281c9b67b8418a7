//! Client-side dimensionality reduction (standardize + PCA) and the shared
//! anchor data every client transforms with its own reducer.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::alignment::linalg::{fix_signs, thin_svd};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-12;

/// A fitted private reduction `x -> ((x - mean) / std) * projection`.
///
/// Lives only on the client; the analyst never sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Reducer {
    feature_means: DVector<f64>,
    feature_stds: DVector<f64>,
    projection: DMatrix<f64>,
}

impl Reducer {
    pub fn feature_means(&self) -> &DVector<f64> {
        &self.feature_means
    }

    pub fn feature_stds(&self) -> &DVector<f64> {
        &self.feature_stds
    }

    /// `m x out_dim`, orthonormal columns.
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn in_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.ncols()
    }
}

fn standardized(features: &DMatrix<f64>, means: &DVector<f64>, stds: &DVector<f64>) -> DMatrix<f64> {
    let mut z = features.clone();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        let (mu, sd) = (means[j], stds[j]);
        col.apply(|x| *x = (*x - mu) / sd);
    }
    z
}

/// Fits standardization and PCA on a client's training features.
///
/// `out_dim = min(target_dim, n - 1, rank)`. Constant features get a zero row
/// in the projection, so their (floored) scale never reaches the output.
pub fn fit_reducer(train_features: &DMatrix<f64>, target_dim: usize) -> Result<Reducer> {
    let (n, m) = train_features.shape();
    if target_dim == 0 || target_dim >= m {
        return Err(Error::invalid(format!(
            "target_dim {target_dim} outside 1..{m}"
        )));
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("PCA needs at least 2 rows, got {n}")));
    }

    let means = DVector::from_iterator(m, train_features.column_iter().map(|c| c.mean()));
    let raw_stds: Vec<f64> = train_features
        .column_iter()
        .zip(means.iter())
        .map(|(c, mu)| (c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    let constant: Vec<bool> = raw_stds.iter().map(|&s| s < STD_FLOOR).collect();
    let stds = DVector::from_iterator(m, raw_stds.iter().map(|&s| s.max(STD_FLOOR)));

    let mut centered = standardized(train_features, &means, &stds);
    for (j, _) in constant.iter().enumerate().filter(|(_, &c)| c) {
        centered.column_mut(j).fill(0.0);
    }

    let svd = thin_svd(&centered);
    let sigma_max = svd.sigma.iter().copied().next().unwrap_or(0.0);
    let tol = sigma_max * (n.max(m) as f64) * f64::EPSILON;
    let rank = svd.sigma.iter().filter(|&&s| s > tol && s > 0.0).count();
    if rank == 0 {
        return Err(Error::Degenerate("all training rows are identical".into()));
    }
    let out_dim = target_dim.min(n - 1).min(rank);

    let mut projection = svd.v.columns(0, out_dim).into_owned();
    for (j, _) in constant.iter().enumerate().filter(|(_, &c)| c) {
        projection.row_mut(j).fill(0.0);
    }
    let mut scratch = DMatrix::zeros(1, out_dim);
    fix_signs(&mut projection, &mut scratch);

    Ok(Reducer {
        feature_means: means,
        feature_stds: stds,
        projection,
    })
}

pub fn apply_reducer(reducer: &Reducer, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if features.ncols() != reducer.in_dim() {
        return Err(Error::shape(format!(
            "reducer expects {} columns, got {}",
            reducer.in_dim(),
            features.ncols()
        )));
    }
    Ok(standardized(features, &reducer.feature_means, &reducer.feature_stds) * &reducer.projection)
}

/// Shared pseudo-data handed identically to every client.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorData {
    pub rows: DMatrix<f64>,
    pub seed: u64,
}

impl AnchorData {
    /// Audit dump with columns `a0..a{m-1}`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record((0..self.rows.ncols()).map(|j| format!("a{j}")))?;
        for row in self.rows.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `r` rows drawn i.i.d. uniform within per-feature `[lo_j, hi_j]`.
pub fn generate_anchor(lo: &[f64], hi: &[f64], r: usize, seed: u64) -> Result<AnchorData> {
    if lo.len() != hi.len() {
        return Err(Error::shape(format!("bounds of length {} and {}", lo.len(), hi.len())));
    }
    if r == 0 {
        return Err(Error::invalid("anchor size must be positive"));
    }
    if let Some(j) = (0..lo.len()).find(|&j| !lo[j].is_finite() || !hi[j].is_finite() || lo[j] > hi[j]) {
        return Err(Error::invalid(format!(
            "inverted or non-finite bounds for feature {j}: [{}, {}]",
            lo[j], hi[j]
        )));
    }
    let mut rng = rng_from(seed);
    let mut rows = DMatrix::zeros(r, lo.len());
    for i in 0..r {
        for j in 0..lo.len() {
            let u: f64 = rng.random();
            rows[(i, j)] = (lo[j] + (hi[j] - lo[j]) * u).min(hi[j]);
        }
    }
    Ok(AnchorData { rows, seed })
}
