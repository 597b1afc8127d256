use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, pinv};
use crate::rng;
use crate::tensor::{khatri_rao, matricize, Mode, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpOptions {
    pub rank: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative reconstruction error changes by less than this.
    pub tol: f64,
}

impl CpOptions {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            ..Default::default()
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

impl Default for CpOptions {
    fn default() -> Self {
        Self {
            rank: 2,
            seed: rng::DEFAULT_SEED,
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

/// Rank-R CP model `Σ_r λ_r a_r ∘ b_r ∘ c_r`.
///
/// Factor columns have unit norm, weights are sorted descending and the
/// largest-magnitude entry of every asset column is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct CpModel {
    pub time_factors: DMatrix<f64>,
    pub asset_factors: DMatrix<f64>,
    pub feature_factors: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub rank: usize,
    pub explained_variance: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    /// Some Hadamard Gram product needed the truncated pseudoinverse.
    pub gram_rank_deficient: bool,
    /// The ridge fallback was used for at least one update.
    pub ridge_used: bool,
    /// Squared residual `‖X − X̂‖²_F` after every sweep.
    pub error_trace: Vec<f64>,
}

impl CpModel {
    /// Build a normalized model from arbitrary factor matrices.
    pub fn from_factors(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        weights: Vec<f64>,
        seed: u64,
    ) -> Self {
        let rank = weights.len();
        let mut model = CpModel {
            time_factors: a,
            asset_factors: b,
            feature_factors: c,
            weights,
            rank,
            explained_variance: f64::NAN,
            iterations: 0,
            converged: true,
            seed,
            gram_rank_deficient: false,
            ridge_used: false,
            error_trace: Vec::new(),
        };
        model.normalize();
        model
    }

    fn normalize(&mut self) {
        for f in [
            &mut self.time_factors,
            &mut self.asset_factors,
            &mut self.feature_factors,
        ] {
            let norms = linalg::normalize_columns(f);
            for (w, n) in self.weights.iter_mut().zip(norms) {
                *w *= n;
            }
        }
        for r in 0..self.rank {
            if self.weights[r] < 0.0 {
                self.weights[r] = -self.weights[r];
                self.time_factors.column_mut(r).neg_mut();
            }
        }
        let mut order: Vec<usize> = (0..self.rank).collect();
        order.sort_by(|&i, &j| self.weights[j].total_cmp(&self.weights[i]));
        let permute = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), order.len(), |i, j| m[(i, order[j])]);
        self.time_factors = permute(&self.time_factors);
        self.asset_factors = permute(&self.asset_factors);
        self.feature_factors = permute(&self.feature_factors);
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        for r in 0..self.rank {
            let col = self.asset_factors.column(r);
            let peak = col
                .iter()
                .copied()
                .max_by(|x, y| x.abs().total_cmp(&y.abs()))
                .unwrap_or(0.0);
            if peak < 0.0 {
                self.asset_factors.column_mut(r).neg_mut();
                self.time_factors.column_mut(r).neg_mut();
            }
        }
    }

    pub(crate) fn scale_weights(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [
            self.time_factors.nrows(),
            self.asset_factors.nrows(),
            self.feature_factors.nrows(),
        ]
    }

    pub fn reconstruct(&self) -> Tensor3 {
        let [t, a, f] = self.shape();
        let mut out = Tensor3::zeros([t, a, f]);
        let mut w = vec![0.0; self.rank];
        for i in 0..t {
            for j in 0..a {
                for (r, wr) in w.iter_mut().enumerate() {
                    *wr = self.weights[r] * self.time_factors[(i, r)] * self.asset_factors[(j, r)];
                }
                for k in 0..f {
                    let v = (0..self.rank).map(|r| w[r] * self.feature_factors[(k, r)]).sum();
                    out.set(i, j, k, v);
                }
            }
        }
        out
    }

    /// Asset loadings scaled by the component weights.
    pub fn weighted_asset_factors(&self) -> DMatrix<f64> {
        let mut b = self.asset_factors.clone();
        for (r, w) in self.weights.iter().enumerate() {
            b.column_mut(r).scale_mut(*w);
        }
        b
    }
}

struct GramSolve {
    deficient: bool,
    ridge: bool,
}

/// `mttkrp · gram⁺`, falling back to a small ridge if the pseudoinverse
/// produces non-finite values.
fn solve_gram(mttkrp: &DMatrix<f64>, gram: &DMatrix<f64>, flags: &mut GramSolve) -> DMatrix<f64> {
    let (inv, deficient) = pinv(gram);
    flags.deficient |= deficient;
    let out = mttkrp * inv;
    if out.iter().all(|x| x.is_finite()) {
        return out;
    }
    flags.ridge = true;
    let r = gram.nrows();
    let lam = 1e-10 * (gram.trace() / r as f64).abs().max(f64::MIN_POSITIVE);
    let reg = gram + DMatrix::identity(r, r) * lam;
    match reg.clone().cholesky() {
        Some(ch) => (ch.solve(&mttkrp.transpose())).transpose(),
        None => mttkrp * pinv(&reg).0,
    }
}

fn init_factor(dim: usize, rank: usize, seed: u64, mode: Mode) -> DMatrix<f64> {
    DMatrix::from_fn(dim, rank, |i, r| {
        rng::uniform_at(seed, mode.index() as u64, (i * rank + r) as u64)
    })
}

/// CP decomposition by alternating least squares.
///
/// Each sweep performs
///
/// ```text
/// A ← X(1) (C ⊙ B) (CᵀC ∗ BᵀB)⁺
/// B ← X(2) (C ⊙ A) (CᵀC ∗ AᵀA)⁺
/// C ← X(3) (B ⊙ A) (BᵀB ∗ AᵀA)⁺
/// ```
///
/// Not reaching `tol` within `max_iter` sweeps is reported through
/// `converged`, not as an error.
pub fn cp_als(x: &Tensor3, opts: &CpOptions) -> Result<CpModel> {
    let rank = opts.rank;
    if rank == 0 {
        return Err(Error::invalid("rank", "must be at least 1"));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("tensor", "contains non-finite entries"));
    }
    let [ti, ai, fi] = x.shape();
    let x1 = matricize(x, Mode::Time).matrix;
    let x2 = matricize(x, Mode::Asset).matrix;
    let x3 = matricize(x, Mode::Feature).matrix;
    let norm_x = x.frobenius_sq();
    if norm_x == 0.0 {
        return Err(Error::ZeroVariance("tensor (all zeros)".into()));
    }

    let mut a = init_factor(ti, rank, opts.seed, Mode::Time);
    let mut b = init_factor(ai, rank, opts.seed, Mode::Asset);
    let mut c = init_factor(fi, rank, opts.seed, Mode::Feature);
    let mut flags = GramSolve {
        deficient: false,
        ridge: false,
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_rel = f64::INFINITY;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;
        let ctc = c.transpose() * &c;

        let btb = b.transpose() * &b;
        a = solve_gram(&(&x1 * khatri_rao(&c, &b)?), &ctc.component_mul(&btb), &mut flags);
        linalg::normalize_columns(&mut a);

        let ata = a.transpose() * &a;
        b = solve_gram(&(&x2 * khatri_rao(&c, &a)?), &ctc.component_mul(&ata), &mut flags);
        linalg::normalize_columns(&mut b);

        let btb = b.transpose() * &b;
        let m = &x3 * khatri_rao(&b, &a)?;
        c = solve_gram(&m, &btb.component_mul(&ata), &mut flags);

        let inner: f64 = c.component_mul(&m).sum();
        let ctc = c.transpose() * &c;
        let model_sq = ata.component_mul(&btb).component_mul(&ctc).sum();
        let err_sq = (norm_x - 2.0 * inner + model_sq).max(0.0);
        trace.push(err_sq);

        let rel = (err_sq / norm_x).sqrt();
        if (prev_rel - rel).abs() < opts.tol {
            converged = true;
            break;
        }
        prev_rel = rel;
    }

    let mut model = CpModel::from_factors(a, b, c, vec![1.0; rank], opts.seed);
    model.iterations = iterations;
    model.converged = converged;
    model.gram_rank_deficient = flags.deficient;
    model.ridge_used = flags.ridge;
    model.error_trace = trace;
    model.explained_variance = super::explained_variance(x, &model.reconstruct())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::synth_tensor;

    #[test]
    fn exact_rank_one_is_recovered() {
        let (t, _) = synth_tensor([8, 6, 5], 1, 0.0, 9).unwrap();
        let m = cp_als(t.values(), &CpOptions::new(1)).unwrap();
        assert!(m.explained_variance >= 1.0 - 1e-9, "{}", m.explained_variance);
    }

    #[test]
    fn model_invariants_hold() {
        let (t, _) = synth_tensor([12, 9, 5], 3, 0.1, 2).unwrap();
        let m = cp_als(t.values(), &CpOptions::new(3)).unwrap();
        for f in [&m.time_factors, &m.asset_factors, &m.feature_factors] {
            for n in linalg::column_norms(f) {
                assert!((n - 1.0).abs() <= 1e-9);
            }
        }
        assert!(m.weights.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.weights.iter().all(|&w| w > 0.0));
        for col in m.asset_factors.column_iter() {
            let peak = col.iter().copied().max_by(|x, y| x.abs().total_cmp(&y.abs())).unwrap();
            assert!(peak > 0.0);
        }
    }

    #[test]
    fn reconstruction_matches_naive_sum() {
        let (t, _) = synth_tensor([5, 4, 3], 2, 0.2, 4).unwrap();
        let m = cp_als(t.values(), &CpOptions::new(2)).unwrap();
        let fast = m.reconstruct();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                for k in 0..3 {
                    let mut naive = 0.0;
                    for r in 0..2 {
                        naive += m.weights[r]
                            * m.time_factors[(i, r)]
                            * m.asset_factors[(j, r)]
                            * m.feature_factors[(k, r)];
                    }
                    num += (fast.get(i, j, k) - naive).powi(2);
                    den += naive * naive;
                }
            }
        }
        assert!((num / den).sqrt() < 1e-9);
    }

    #[test]
    fn error_trace_non_increasing() {
        let (t, _) = synth_tensor([30, 10, 5], 3, 0.3, 8).unwrap();
        let m = cp_als(t.values(), &CpOptions::new(3)).unwrap();
        let scale = t.values().frobenius_sq();
        for w in m.error_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * scale, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (t, _) = synth_tensor([10, 7, 5], 2, 0.1, 1).unwrap();
        let a = cp_als(t.values(), &CpOptions::new(2).seed(5)).unwrap();
        let b = cp_als(t.values(), &CpOptions::new(2).seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn over_ranked_fit_flags_deficiency_or_converges() {
        // rank exceeds the feature dimension: the Gram product may go singular
        let (t, _) = synth_tensor([6, 4, 2], 1, 0.0, 3).unwrap();
        let m = cp_als(t.values(), &CpOptions::new(4)).unwrap();
        assert!(m.explained_variance > 0.999);
        assert!(m.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn zero_rank_rejected() {
        let (t, _) = synth_tensor([3, 3, 3], 1, 0.0, 3).unwrap();
        assert!(cp_als(t.values(), &CpOptions::new(0)).is_err());
    }
}
