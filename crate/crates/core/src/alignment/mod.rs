//! Alignment of client-specific intermediate representations into one
//! common space through shared anchor data.
//!
//! The anchor representations of all members are concatenated column-wise
//! and truncated by SVD; the left singular vectors form the common
//! representation `Z`, and each member's mapping is
//! `G_i = pinv(anchor_rep_i) * Z`.

pub mod linalg;

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use linalg::{pseudoinverse, thin_svd, truncated_svd, SingularCutoff, Svd, DEFAULT_PINV_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// `Z`, `r x m_hat`, orthonormal columns.
    pub common_rep: DMatrix<f64>,
    /// One `m_i x m_hat` mapping per member, in input order.
    pub mappings: Vec<DMatrix<f64>>,
    pub singular_values: Vec<f64>,
}

impl AlignmentResult {
    pub fn integrated_dim(&self) -> usize {
        self.common_rep.ncols()
    }

    /// Writes `alignment.json` (shapes and singular values) and
    /// `alignment.bin`, the column-major little-endian f64 values of `Z`
    /// followed by each mapping.
    pub fn write_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let header = BundleHeader {
            common_rep: [self.common_rep.nrows(), self.common_rep.ncols()],
            mappings: self.mappings.iter().map(|g| [g.nrows(), g.ncols()]).collect(),
            singular_values: self.singular_values.clone(),
        };
        let json = dir.join("alignment.json");
        fs::write(&json, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&json, e))?;
        let mut bytes = Vec::new();
        for m in std::iter::once(&self.common_rep).chain(&self.mappings) {
            bytes.extend(m.iter().flat_map(|v| v.to_le_bytes()));
        }
        let bin = dir.join("alignment.bin");
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
    }

    pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let json = dir.join("alignment.json");
        let header: BundleHeader =
            serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        let bin = dir.join("alignment.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let shapes: Vec<[usize; 2]> = std::iter::once(header.common_rep).chain(header.mappings).collect();
        let expected: usize = shapes.iter().map(|[r, c]| 8 * r * c).sum();
        if bytes.len() != expected {
            return Err(Error::shape(format!("bundle holds {} bytes, header implies {expected}", bytes.len())));
        }
        let mut values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
        let mut matrices: Vec<DMatrix<f64>> = shapes
            .iter()
            .map(|&[r, c]| DMatrix::from_iterator(r, c, values.by_ref().take(r * c)))
            .collect();
        let common_rep = matrices.remove(0);
        Ok(Self {
            common_rep,
            mappings: matrices,
            singular_values: header.singular_values,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    common_rep: [usize; 2],
    mappings: Vec<[usize; 2]>,
    singular_values: Vec<f64>,
}

/// Computes the common representation and per-member mappings.
pub fn compute_mappings(anchor_reps: &[&DMatrix<f64>], cutoff: SingularCutoff) -> Result<AlignmentResult> {
    compute_mappings_with_tol(anchor_reps, cutoff, DEFAULT_PINV_TOL)
}

pub fn compute_mappings_with_tol(
    anchor_reps: &[&DMatrix<f64>],
    cutoff: SingularCutoff,
    pinv_tol: f64,
) -> Result<AlignmentResult> {
    let first = anchor_reps
        .first()
        .ok_or_else(|| Error::invalid("alignment needs at least one member"))?;
    let r = first.nrows();
    if let Some((i, bad)) = anchor_reps.iter().enumerate().find(|(_, a)| a.nrows() != r) {
        return Err(Error::shape(format!(
            "anchor rep {i} has {} rows, expected {r}",
            bad.nrows()
        )));
    }

    let total_cols: usize = anchor_reps.iter().map(|a| a.ncols()).sum();
    let mut concat = DMatrix::zeros(r, total_cols);
    let mut col = 0;
    for a in anchor_reps {
        concat.columns_mut(col, a.ncols()).copy_from(*a);
        col += a.ncols();
    }

    let svd = truncated_svd(&concat, cutoff)?;
    let z = svd.u;
    let mappings = anchor_reps
        .iter()
        .map(|a| pseudoinverse(a, pinv_tol) * &z)
        .collect();
    Ok(AlignmentResult {
        common_rep: z,
        mappings,
        singular_values: svd.sigma.iter().copied().collect(),
    })
}

/// `sum_i ||Z - anchor_rep_i * G_i||_F^2`.
pub fn alignment_objective(anchor_reps: &[&DMatrix<f64>], z: &DMatrix<f64>, mappings: &[DMatrix<f64>]) -> f64 {
    anchor_reps
        .iter()
        .zip(mappings)
        .map(|(a, g)| (z - *a * g).norm_squared())
        .sum()
}

/// Row-wise stack of aligned member representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrated {
    pub matrix: DMatrix<f64>,
    /// `(member index, local row)` for every output row.
    pub provenance: Vec<(usize, usize)>,
}

impl Integrated {
    /// Rows contributed by one member.
    pub fn member_rows(&self, member: usize) -> DMatrix<f64> {
        let rows: Vec<usize> = self
            .provenance
            .iter()
            .enumerate()
            .filter(|(_, (m, _))| *m == member)
            .map(|(i, _)| i)
            .collect();
        self.matrix.select_rows(rows.iter())
    }
}

pub fn integrate(client_reps: &[&DMatrix<f64>], mappings: &[DMatrix<f64>]) -> Result<Integrated> {
    if client_reps.len() != mappings.len() {
        return Err(Error::shape(format!(
            "{} client reps but {} mappings",
            client_reps.len(),
            mappings.len()
        )));
    }
    let dim = mappings.first().map_or(0, |g| g.ncols());
    for (i, (x, g)) in client_reps.iter().zip(mappings).enumerate() {
        if x.ncols() != g.nrows() || g.ncols() != dim {
            return Err(Error::shape(format!(
                "member {i}: rep has {} columns, mapping is {}x{}",
                x.ncols(),
                g.nrows(),
                g.ncols()
            )));
        }
    }
    let n: usize = client_reps.iter().map(|x| x.nrows()).sum();
    let mut matrix = DMatrix::zeros(n, dim);
    let mut provenance = Vec::with_capacity(n);
    let mut row = 0;
    for (i, (x, g)) in client_reps.iter().zip(mappings).enumerate() {
        matrix.rows_mut(row, x.nrows()).copy_from(&(*x * g));
        provenance.extend((0..x.nrows()).map(|r| (i, r)));
        row += x.nrows();
    }
    Ok(Integrated { matrix, provenance })
}
