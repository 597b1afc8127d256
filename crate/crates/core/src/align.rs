//! Orthogonal Procrustes rotation, Tucker's congruence coefficient and
//! alternative cross-space similarity measures.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, svd_sorted, sym_eigen_sorted};

/// Orthogonal `p × p` matrix minimizing `‖AQ − B‖_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    pub q: DMatrix<f64>,
    /// `AᵀB` was rank deficient, so the minimizer is not unique.
    pub rank_deficient: bool,
}

impl Rotation {
    pub fn identity(p: usize) -> Self {
        Self {
            q: DMatrix::identity(p, p),
            rank_deficient: false,
        }
    }
}

/// `Q* = U Vᵀ` where `U Σ Vᵀ = SVD(AᵀB)`: maximizing `tr(Qᵀ U Σ Vᵀ)` needs
/// `Vᵀ Qᵀ U = I`.
pub fn procrustes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Rotation> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "procrustes needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.nrows() < 2 {
        return Err(Error::invalid("a", "need at least two rows"));
    }
    let svd = svd_sorted(&(a.transpose() * b));
    let smax = svd.singular_values.get(0).copied().unwrap_or(0.0);
    let rank_deficient = svd
        .singular_values
        .iter()
        .any(|&s| s <= linalg::REL_CUTOFF * smax);
    Ok(Rotation {
        q: &svd.u * svd.v.transpose(),
        rank_deficient,
    })
}

/// Append zero columns up to `target` width.
pub fn pad_columns(m: &DMatrix<f64>, target: usize) -> Result<DMatrix<f64>> {
    if target < m.ncols() {
        return Err(Error::invalid(
            "target",
            format!("cannot pad {} columns down to {target}", m.ncols()),
        ));
    }
    Ok(m.clone().resize_horizontally(target, 0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reduced {
    pub matrix: DMatrix<f64>,
    /// Share of squared singular values kept.
    pub retained_energy: f64,
}

/// Best rank-`d` column-space representation: `U_d Σ_d`.
pub fn svd_reduce(m: &DMatrix<f64>, d: usize) -> Result<Reduced> {
    if d == 0 || d > m.nrows().min(m.ncols()) {
        return Err(Error::invalid(
            "d",
            format!("{d} outside 1..={}", m.nrows().min(m.ncols())),
        ));
    }
    let svd = svd_sorted(m);
    let mut out = svd.u.columns(0, d).into_owned();
    for k in 0..d {
        out.column_mut(k).scale_mut(svd.singular_values[k]);
    }
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let kept: f64 = svd.singular_values.iter().take(d).map(|s| s * s).sum();
    Ok(Reduced {
        matrix: out,
        retained_energy: if total > 0.0 { kept / total } else { 1.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phi {
    pub value: f64,
    /// At least one input was the zero vector; `value` is then 0.
    pub degenerate: bool,
}

/// Tucker's congruence: cosine similarity without centering.
pub fn tucker_phi(x: &[f64], y: &[f64]) -> Result<Phi> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return Ok(Phi {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Phi {
        value: (xy / (xx * yy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimMode {
    /// Zero-pad the narrower matrix.
    Pad,
    /// SVD-reduce the wider matrix.
    Reduce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub rotation: Rotation,
    pub per_dim_phi: Vec<f64>,
    pub mean_abs_phi: f64,
    pub padded_dims: usize,
    pub method: DimMode,
    pub n_entities: usize,
}

/// Per-column φ between `AQ` (or `A`) and `B`, and their mean absolute value
/// over every column, zero columns included.
pub fn matrix_congruence(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rotate: bool,
) -> Result<AlignmentResult> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "congruence needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let rotation = if rotate {
        procrustes(a, b)?
    } else {
        Rotation::identity(a.ncols())
    };
    let aq = a * &rotation.q;
    let per_dim_phi = (0..a.ncols())
        .map(|j| tucker_phi(aq.column(j).as_slice(), b.column(j).as_slice()).map(|p| p.value))
        .collect::<Result<Vec<_>>>()?;
    let padded_dims = (0..b.ncols()).filter(|&j| b.column(j).iter().all(|&x| x == 0.0)).count();
    let mean_abs_phi = per_dim_phi.iter().map(|p| p.abs()).sum::<f64>() / per_dim_phi.len().max(1) as f64;
    Ok(AlignmentResult {
        rotation,
        per_dim_phi,
        mean_abs_phi,
        padded_dims,
        method: DimMode::Pad,
        n_entities: a.nrows(),
    })
}

/// Full alignment of two entity-aligned matrices of possibly different width.
///
/// With [`DimMode::Pad`] the wider matrix is rotated onto the zero-padded
/// narrower one, so padded dimensions show up as exact zeros in
/// `per_dim_phi`. With [`DimMode::Reduce`] the wider matrix is SVD-reduced to
/// the narrower width and `a` is rotated onto `b`.
pub fn align(a: &DMatrix<f64>, b: &DMatrix<f64>, mode: DimMode) -> Result<AlignmentResult> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "matrices have {} and {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let (p, q) = (a.ncols(), b.ncols());
    let mut res = match mode {
        DimMode::Pad if p >= q => matrix_congruence(a, &pad_columns(b, p)?, true)?,
        DimMode::Pad => matrix_congruence(b, &pad_columns(a, q)?, true)?,
        DimMode::Reduce if p > q => matrix_congruence(&svd_reduce(a, q)?.matrix, b, true)?,
        DimMode::Reduce if q > p => matrix_congruence(a, &svd_reduce(b, p)?.matrix, true)?,
        DimMode::Reduce => matrix_congruence(a, b, true)?,
    };
    res.method = mode;
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltMetric {
    Rv,
    #[serde(rename = "dcor")]
    DCor,
    Cca,
    Pls,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltScore {
    pub value: f64,
    /// CCA only: ridge regularization was applied.
    pub regularized: bool,
}

pub fn alt_alignment(a: &DMatrix<f64>, b: &DMatrix<f64>, metric: AltMetric) -> Result<AltScore> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "matrices have {} and {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.nrows() < 3 {
        return Err(Error::invalid("a", "need at least three rows"));
    }
    let plain = |value| AltScore {
        value,
        regularized: false,
    };
    match metric {
        AltMetric::Rv => rv_coefficient(a, b).map(plain),
        AltMetric::DCor => distance_correlation(a, b).map(plain),
        AltMetric::Cca => first_canonical_correlation(a, b),
        AltMetric::Pls => pls_score(a, b).map(plain),
    }
}

/// RV coefficient on column-centered data.
pub fn rv_coefficient(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let x = linalg::center_columns(a);
    let y = linalg::center_columns(b);
    let cross = linalg::frobenius_sq(&(x.transpose() * &y));
    let xx = linalg::frobenius_sq(&(x.transpose() * &x));
    let yy = linalg::frobenius_sq(&(y.transpose() * &y));
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::ZeroVariance("RV input (constant matrix)".into()));
    }
    Ok(cross / (xx * yy).sqrt())
}

fn row_distances(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| (m.row(i) - m.row(j)).norm())
}

/// Squared distance covariance (V-statistic), expanded as
/// `mean(a∘b) + mean(a)·mean(b) − 2·mean_i(rowmean(a)_i · rowmean(b)_i)`.
fn dcov_sq(da: &DMatrix<f64>, db: &DMatrix<f64>) -> f64 {
    let n = da.nrows() as f64;
    let cross = da.component_mul(db).sum() / (n * n);
    let grand = (da.sum() / (n * n)) * (db.sum() / (n * n));
    let ra = da.column_sum() / n;
    let rb = db.column_sum() / n;
    let rows = ra.dot(&rb) / n;
    (cross + grand - 2.0 * rows).max(0.0)
}

/// Distance correlation of Székely, Rizzo and Bakirov.
pub fn distance_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let da = row_distances(a);
    let db = row_distances(b);
    let vab = dcov_sq(&da, &db);
    let va = dcov_sq(&da, &da);
    let vb = dcov_sq(&db, &db);
    if va == 0.0 || vb == 0.0 {
        return Err(Error::ZeroVariance("dCor input (all rows identical)".into()));
    }
    Ok((vab / (va * vb).sqrt()).sqrt())
}

/// Inverse square root of a PSD matrix, dropping near-null directions.
fn inv_sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_sorted(m);
    let cut = linalg::REL_CUTOFF.sqrt() * vals.get(0).copied().unwrap_or(0.0).max(0.0);
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &v) in vals.iter().enumerate() {
        if v > cut && v > 0.0 {
            let u = vecs.column(k);
            out += (u * u.transpose()) / v.sqrt();
        }
    }
    out
}

/// First canonical correlation. Both covariance blocks get a ridge of
/// `1e-6 · trace / dim` whenever `n < 3 · max(p, q)`.
pub fn first_canonical_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<AltScore> {
    let n = a.nrows();
    let x = linalg::center_columns(a);
    let y = linalg::center_columns(b);
    let denom = (n - 1) as f64;
    let mut cxx = x.transpose() * &x / denom;
    let mut cyy = y.transpose() * &y / denom;
    let cxy = x.transpose() * &y / denom;
    let regularized = n < 3 * a.ncols().max(b.ncols());
    if regularized {
        for c in [&mut cxx, &mut cyy] {
            let lam = 1e-6 * c.trace() / c.nrows() as f64;
            for i in 0..c.nrows() {
                c[(i, i)] += lam;
            }
        }
    }
    if cxx.trace() == 0.0 || cyy.trace() == 0.0 {
        return Err(Error::ZeroVariance("CCA input (constant matrix)".into()));
    }
    let m = inv_sqrt_psd(&cxx) * cxy * inv_sqrt_psd(&cyy);
    let s = svd_sorted(&m).singular_values;
    Ok(AltScore {
        value: s.get(0).copied().unwrap_or(0.0).clamp(0.0, 1.0),
        regularized,
    })
}

fn standardize_sample(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = linalg::center_columns(m);
    let n = m.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let sd = (col.norm_squared() / (n - 1.0)).sqrt();
        if sd > 0.0 {
            col.scale_mut(1.0 / sd);
        }
    }
    x
}

/// First PLS component score in `[0, 1]`: the leading singular value of the
/// standardized cross-covariance divided by the product of each block's
/// leading standardized singular value.
pub fn pls_score(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let x = standardize_sample(a);
    let y = standardize_sample(b);
    let denom = (a.nrows() - 1) as f64;
    let s_xy = svd_sorted(&(x.transpose() * &y / denom)).singular_values[0];
    let s_x = svd_sorted(&x).singular_values[0];
    let s_y = svd_sorted(&y).singular_values[0];
    let norm = s_x * s_y / denom;
    if norm == 0.0 {
        return Err(Error::ZeroVariance("PLS input (constant matrix)".into()));
    }
    Ok((s_xy / norm).clamp(0.0, 1.0))
}

/// Any of the alignment statistics, as used by the inference routines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean `|φ|` after Procrustes rotation.
    Phi(DimMode),
    Alt(AltMetric),
}

impl Metric {
    pub fn score(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
        match self {
            Metric::Phi(mode) => align(a, b, *mode).map(|r| r.mean_abs_phi),
            Metric::Alt(m) => alt_alignment(a, b, *m).map(|s| s.value),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Phi(DimMode::Pad) => "phi",
            Metric::Phi(DimMode::Reduce) => "phi_reduced",
            Metric::Alt(AltMetric::Rv) => "rv",
            Metric::Alt(AltMetric::DCor) => "dcor",
            Metric::Alt(AltMetric::Cca) => "cca",
            Metric::Alt(AltMetric::Pls) => "pls",
        }
    }
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Phi(DimMode::Pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, vals)
    }

    #[test]
    fn procrustes_of_identical_is_identity() {
        let a = m(4, 2, &[1.0, 0.2, -0.3, 2.0, 0.5, 0.5, 1.5, -1.0]);
        let r = procrustes(&a, &a).unwrap();
        assert!((r.q - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(!r.rank_deficient);
    }

    #[test]
    fn procrustes_flags_deficiency() {
        let a = m(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let r = procrustes(&a, &a).unwrap();
        assert!(r.rank_deficient);
        let qtq = r.q.transpose() * &r.q;
        assert!((qtq - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn padding() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pad_columns(&a, 2).unwrap(), a);
        let p = pad_columns(&m(3, 2, &[1.0; 6]), 10).unwrap();
        assert_eq!(p.ncols(), 10);
        assert!(p.columns(2, 8).iter().all(|&x| x == 0.0));
        assert!(pad_columns(&a, 1).is_err());
    }

    #[test]
    fn phi_basic_cases() {
        assert_eq!(tucker_phi(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value, 1.0);
        assert_eq!(tucker_phi(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let z = tucker_phi(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.degenerate);
        assert!(tucker_phi(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn padded_dims_contribute_zero() {
        let a = m(4, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0, 2.0]);
        let b = m(4, 1, &[1.0, 2.0, 0.5, 1.0]);
        let r = align(&a, &b, DimMode::Pad).unwrap();
        assert_eq!(r.padded_dims, 2);
        assert_eq!(r.per_dim_phi.len(), 3);
        assert_eq!(&r.per_dim_phi[1..], &[0.0, 0.0]);
        assert!((r.mean_abs_phi - r.per_dim_phi[0].abs() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reduce_full_rank_keeps_gram() {
        let a = m(4, 2, &[1.0, 0.5, -1.0, 2.0, 0.3, 0.1, 2.0, -1.0]);
        let r = svd_reduce(&a, 2).unwrap();
        let g1 = &a * a.transpose();
        let g2 = &r.matrix * r.matrix.transpose();
        assert!((g1 - g2).amax() < 1e-9);
        assert!(svd_reduce(&a, 3).is_err());
    }

    #[test]
    fn reduce_rank_one_keeps_all_energy() {
        let u = [1.0, 2.0, -1.0];
        let v = [0.5, 1.0, 3.0, -2.0];
        let a = DMatrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        assert!((svd_reduce(&a, 1).unwrap().retained_energy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rv_and_dcor_self_are_one() {
        let a = m(5, 2, &[1.0, 2.0, 0.0, 1.0, 3.0, -1.0, 2.0, 2.0, -1.0, 0.5]);
        assert_eq!(rv_coefficient(&a, &a).unwrap(), 1.0);
        assert_eq!(distance_correlation(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn cca_flags_ridge_for_small_n() {
        let a = m(4, 2, &[1.0, 2.0, 0.0, 1.0, 3.0, -1.0, 2.0, 2.0]);
        let s = first_canonical_correlation(&a, &a).unwrap();
        assert!(s.regularized);
        assert!(s.value > 0.99);
    }

    #[test]
    fn pls_bounded() {
        let a = m(5, 2, &[1.0, 2.0, 0.0, 1.0, 3.0, -1.0, 2.0, 2.0, -1.0, 0.5]);
        let b = m(5, 1, &[0.3, -1.0, 2.0, 0.0, 1.0]);
        let s = pls_score(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert!((pls_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
