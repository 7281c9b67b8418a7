//! Dense SVD-based kernels: sorted thin SVD, truncated SVD, pseudoinverse.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which singular values survive truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum SingularCutoff {
    /// Keep `sigma >= value * sigma_max`.
    Relative(f64),
    /// Keep `sigma >= value`.
    Absolute(f64),
}

impl Default for SingularCutoff {
    fn default() -> Self {
        SingularCutoff::Relative(1e-2)
    }
}

impl SingularCutoff {
    fn threshold(&self, sigma_max: f64) -> f64 {
        match *self {
            SingularCutoff::Relative(r) => r * sigma_max,
            SingularCutoff::Absolute(a) => a,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SingularCutoff::Relative(r) if !(r > 0.0 && r < 1.0) => {
                Err(Error::invalid(format!("relative cutoff {r} outside (0, 1)")))
            }
            SingularCutoff::Absolute(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::invalid(format!("absolute cutoff {a} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// `U * diag(sigma) * V^T` with singular values in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Reassembles `U * diag(sigma) * V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    fn keep_leading(self, k: usize) -> Svd {
        Svd {
            u: self.u.columns(0, k).into_owned(),
            sigma: self.sigma.rows(0, k).into_owned(),
            v: self.v.columns(0, k).into_owned(),
        }
    }
}

/// Index of the largest-magnitude entry; ties go to the lowest index.
fn dominant_index(col: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in col.enumerate() {
        let a = x.abs();
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.filter(|&(_, a)| a > 0.0).map(|(i, _)| i)
}

/// Flips column pairs so the largest-magnitude entry of each `lead` column is
/// positive.
pub(crate) fn fix_signs(lead: &mut DMatrix<f64>, follow: &mut DMatrix<f64>) {
    for j in 0..lead.ncols() {
        if let Some(i) = dominant_index(lead.column(j).iter().copied()) {
            if lead[(i, j)] < 0.0 {
                lead.column_mut(j).neg_mut();
                follow.column_mut(j).neg_mut();
            }
        }
    }
}

/// Full thin SVD, sorted descending, signs fixed on the left vectors.
pub fn thin_svd(a: &DMatrix<f64>) -> Svd {
    let p = a.nrows().min(a.ncols());
    if p == 0 {
        return Svd {
            u: DMatrix::zeros(a.nrows(), 0),
            sigma: DVector::zeros(0),
            v: DMatrix::zeros(a.ncols(), 0),
        };
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));
    let mut u_sorted = u.select_columns(order.iter());
    let mut v_sorted = v_t.transpose().select_columns(order.iter());
    let sigma_sorted = DVector::from_iterator(order.len(), order.iter().map(|&i| sigma[i]));
    fix_signs(&mut u_sorted, &mut v_sorted);
    Svd {
        u: u_sorted,
        sigma: sigma_sorted,
        v: v_sorted,
    }
}

/// SVD keeping only components that pass `cutoff`.
pub fn truncated_svd(a: &DMatrix<f64>, cutoff: SingularCutoff) -> Result<Svd> {
    cutoff.validate()?;
    let full = thin_svd(a);
    let sigma_max = full.sigma.iter().copied().next().unwrap_or(0.0);
    if sigma_max <= 0.0 {
        return Err(Error::Degenerate("cannot truncate the SVD of an all-zero matrix".into()));
    }
    let threshold = cutoff.threshold(sigma_max);
    let keep = full.sigma.iter().take_while(|&&s| s >= threshold).count();
    if keep == 0 {
        return Err(Error::Degenerate(format!(
            "no singular value reaches the cutoff {threshold:e}"
        )));
    }
    Ok(full.keep_leading(keep))
}

pub const DEFAULT_PINV_TOL: f64 = 1e-10;

/// Moore-Penrose pseudoinverse; singular values below `tol * sigma_max` are
/// treated as zero. A zero matrix maps to the zero matrix of transposed shape.
pub fn pseudoinverse(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let svd = thin_svd(a);
    let sigma_max = svd.sigma.iter().copied().next().unwrap_or(0.0);
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    if sigma_max <= 0.0 {
        return out;
    }
    let threshold = tol * sigma_max;
    for (j, &s) in svd.sigma.iter().enumerate() {
        if s <= threshold {
            break;
        }
        // out += v_j * u_j^T / s
        out.ger(1.0 / s, &svd.v.column(j), &svd.u.column(j), 1.0);
    }
    out
}
