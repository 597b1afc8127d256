//! Dense linear-algebra helpers shared by the decomposition and alignment code.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

/// Singular values below `REL_CUTOFF * sigma_max` are treated as zero.
pub const REL_CUTOFF: f64 = 1e-12;

/// Thin SVD with singular values sorted in descending order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn svd_sorted(m: &DMatrix<f64>) -> SortedSvd {
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)]);
    let singular_values = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
    SortedSvd {
        u,
        singular_values,
        v,
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues;
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let vecs = DMatrix::from_fn(m.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&i| vals[i]));
    (vals, vecs)
}

/// Moore-Penrose pseudoinverse. The flag reports whether any singular value
/// fell below the relative cutoff.
pub fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let svd = svd_sorted(m);
    let smax = svd.singular_values.get(0).copied().unwrap_or(0.0);
    let cut = REL_CUTOFF * smax;
    let mut deficient = false;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cut || s == 0.0 {
            deficient = true;
            continue;
        }
        let vk = svd.v.column(k);
        let uk = svd.u.column(k);
        out += (vk * uk.transpose()) / s;
    }
    (out, deficient)
}

/// `k` leading left singular vectors of `m` (orthonormal columns).
pub fn leading_left_singular(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    if m.nrows() <= m.ncols() {
        let gram = m * m.transpose();
        let (_, vecs) = sym_eigen_sorted(&gram);
        vecs.columns(0, k).into_owned()
    } else {
        svd_sorted(m).u.columns(0, k).into_owned()
    }
}

pub fn column_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

pub fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    m.column_iter().map(|c| c.sum() / n).collect()
}

pub fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let means = column_means(m);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - means[j])
}

/// Population standard deviation of each column.
pub fn column_pop_std(m: &DMatrix<f64>) -> Vec<f64> {
    let means = column_means(m);
    let n = m.nrows() as f64;
    m.column_iter()
        .zip(&means)
        .map(|(c, mu)| (c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt())
        .collect()
}

/// Scale each column to unit 2-norm; zero columns are left untouched.
pub fn normalize_columns(m: &mut DMatrix<f64>) -> Vec<f64> {
    let norms = column_norms(m);
    for (j, &nrm) in norms.iter().enumerate() {
        if nrm > 0.0 {
            m.column_mut(j).scale_mut(1.0 / nrm);
        }
    }
    norms
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Select the given rows of `m`, in order.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Drop column `skip` from `m`.
pub fn drop_column(m: &DMatrix<f64>, skip: usize) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..m.ncols()).filter(|&j| j != skip).collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |i, j| m[(i, keep[j])])
}

pub fn is_orthonormal(m: &DMatrix<f64>, tol: f64) -> bool {
    let g = m.transpose() * m;
    let id = DMatrix::<f64>::identity(g.nrows(), g.ncols());
    (g - id).amax() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let (p, def) = pinv(&m);
        assert!(!def);
        let id = &m * &p;
        assert!((id - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn pinv_flags_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let (p, def) = pinv(&m);
        assert!(def);
        // Penrose condition m p m = m
        assert!((&m * &p * &m - &m).amax() < 1e-12);
    }

    #[test]
    fn svd_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
        let s = svd_sorted(&m);
        assert!(s.singular_values[0] >= s.singular_values[1]);
        assert!((s.singular_values[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn leading_vectors_orthonormal_both_shapes() {
        let wide = DMatrix::from_fn(3, 8, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let tall = wide.transpose();
        assert!(is_orthonormal(&leading_left_singular(&wide, 2), 1e-10));
        assert!(is_orthonormal(&leading_left_singular(&tall, 2), 1e-10));
    }
}
