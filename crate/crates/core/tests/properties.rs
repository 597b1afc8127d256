use nalgebra::DMatrix;
use proptest::prelude::*;

use tensor_align::align::{align, distance_correlation, procrustes, rv_coefficient, tucker_phi, DimMode, Metric};
use tensor_align::claims::{aggregate_claims, cohen_kappa, AggregateOptions, ChunkScores, Taxonomy};
use tensor_align::decompose::{cp_als, tucker, CpOptions, TuckerOptions};
use tensor_align::describe::spearman;
use tensor_align::inference::{leave_one_out, permutation_test, PermutationOptions};
use tensor_align::stats::{compute_asset_stats, max_drawdown, residualize, trend_slope, zscore_columns, StatsOptions};
use tensor_align::tensor::{khatri_rao, matricize, znormalize_slices, Mode, Tensor3};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn tensor(max: usize) -> impl Strategy<Value = Tensor3> {
    (1..max, 1..max, 1..max).prop_flat_map(|(t, a, f)| {
        prop::collection::vec(-10.0f64..10.0, t * a * f)
            .prop_map(move |v| Tensor3::from_vec([t, a, f], v).unwrap())
    })
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("e{i}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn refold_inverts_matricize(t in tensor(6)) {
        for mode in [Mode::Time, Mode::Asset, Mode::Feature] {
            prop_assert_eq!(&matricize(&t, mode).refold().unwrap(), &t);
        }
    }

    #[test]
    fn khatri_rao_columns_are_kronecker(a in matrix(3, 2), b in matrix(4, 2)) {
        let kr = khatri_rao(&a, &b).unwrap();
        for r in 0..2 {
            let kron = a.column(r).kronecker(&b.column(r));
            prop_assert!((kr.column(r) - kron).norm() < 1e-12);
        }
    }

    #[test]
    fn znormalize_is_idempotent(t in tensor(6)) {
        let l = labels(t.shape()[2]);
        if let Ok(z) = znormalize_slices(&t, &l) {
            let zz = znormalize_slices(&z, &l).unwrap();
            for (x, y) in z.as_slice().iter().zip(zz.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phi_is_bounded_and_symmetric(x in prop::collection::vec(-3.0f64..3.0, 8), y in prop::collection::vec(-3.0f64..3.0, 8)) {
        let a = tucker_phi(&x, &y).unwrap().value;
        let b = tucker_phi(&y, &x).unwrap().value;
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn procrustes_rotation_is_orthogonal_and_no_worse_than_identity(a in matrix(10, 3), b in matrix(10, 3)) {
        let q = procrustes(&a, &b).unwrap().q;
        prop_assert!((q.transpose() * &q - DMatrix::identity(3, 3)).norm() < 1e-9);
        prop_assert!((&a * &q - &b).norm_squared() <= (&a - &b).norm_squared() + 1e-9);
    }

    #[test]
    fn rv_and_dcor_ignore_rotations(a in matrix(12, 3), b in matrix(12, 2), angle in 0.0f64..std::f64::consts::TAU) {
        let (c, s) = (angle.cos(), angle.sin());
        let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let rb = &b * q;
        if let (Ok(x), Ok(y)) = (rv_coefficient(&a, &b), rv_coefficient(&a, &rb)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        if let (Ok(x), Ok(y)) = (distance_correlation(&a, &b), distance_correlation(&a, &rb)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn padding_dilutes_mean_phi(a in matrix(15, 4), b in matrix(15, 2)) {
        let r = align(&a, &b, DimMode::Pad).unwrap();
        let live = r.per_dim_phi.len() - r.padded_dims;
        let live_mean = r.per_dim_phi[..live].iter().map(|v| v.abs()).sum::<f64>() / live as f64;
        prop_assert!(r.mean_abs_phi <= live_mean + 1e-12);
    }

    #[test]
    fn zscore_columns_are_standardized(m in matrix(20, 3)) {
        if let Ok(z) = zscore_columns(&m, &labels(3)) {
            for c in z.column_iter() {
                let mean = c.mean();
                let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residuals_are_uncorrelated_with_covariate(m in matrix(15, 3), cov in prop::collection::vec(-5.0f64..5.0, 15)) {
        if let Ok(r) = residualize(&m, &cov) {
            let cm = cov.iter().sum::<f64>() / 15.0;
            for c in r.matrix.column_iter() {
                let mm = c.mean();
                let s: f64 = c.iter().zip(&cov).map(|(x, y)| (x - mm) * (y - cm)).sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn drawdown_and_trend_under_rescaling(p in prop::collection::vec(1.0f64..100.0, 5..40), k in 0.1f64..50.0) {
        let q: Vec<f64> = p.iter().map(|x| k * x).collect();
        prop_assert!((max_drawdown(&p) - max_drawdown(&q)).abs() < 1e-12);
        prop_assert!((trend_slope(&q) - k * trend_slope(&p)).abs() < 1e-9 * (1.0 + trend_slope(&q).abs()));
    }

    #[test]
    fn sharpe_sign_follows_mean(p in prop::collection::vec(1.0f64..100.0, 12..40)) {
        let vol = vec![1.0; p.len()];
        let opts = StatsOptions { vol_window: 4, ..Default::default() };
        if let Ok(s) = compute_asset_stats("x", &p, &vol, &opts) {
            prop_assert_eq!(s.sharpe.signum(), s.mean_return.signum());
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(x in prop::collection::vec(-3.0f64..3.0, 10), y in prop::collection::vec(-3.0f64..3.0, 10)) {
        let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        if let (Some(a), Some(b)) = (spearman(&x, &y), spearman(&ex, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kappa_is_bounded(a in prop::collection::vec(0usize..4, 30), b in prop::collection::vec(0usize..4, 30)) {
        let k = cohen_kappa(&a, &b, 4);
        prop_assert!((-1.0..=1.0).contains(&k));
        prop_assert!((cohen_kappa(&a, &a, 4) - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cp_model_invariants(t in tensor(7), seed in 0u64..1000) {
        let rank = 2;
        let m = cp_als(&t, &CpOptions::new(rank).seed(seed)).unwrap();
        for f in [&m.time_factors, &m.asset_factors, &m.feature_factors] {
            for c in f.column_iter() {
                let n = c.norm();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            }
        }
        prop_assert!(m.weights.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(m.error_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-12));
        let [ti, ai, fi] = t.shape();
        let rec = m.reconstruct();
        for i in 0..ti {
            for j in 0..ai {
                for k in 0..fi {
                    let naive: f64 = (0..m.rank)
                        .map(|r| m.weights[r] * m.time_factors[(i, r)] * m.asset_factors[(j, r)] * m.feature_factors[(k, r)])
                        .sum();
                    prop_assert!((rec.get(i, j, k) - naive).abs() <= 1e-9 * (1.0 + naive.abs()));
                }
            }
        }
        prop_assert_eq!(cp_als(&t, &CpOptions::new(rank).seed(seed)).unwrap(), m);
    }

    #[test]
    fn tucker_factors_are_orthonormal(t in tensor(7)) {
        let [a, b, c] = t.shape();
        let ranks = [a.min(2), b.min(2), c.min(2)];
        let valid = (0..3).all(|n| ranks[n] <= ranks[(n + 1) % 3] * ranks[(n + 2) % 3]);
        let fit = tucker(&t, ranks, &TuckerOptions::default());
        if !valid {
            prop_assert!(fit.is_err());
            return Ok(());
        }
        let constant = t.as_slice().iter().all(|&v| v == t.as_slice()[0]);
        prop_assert_eq!(fit.is_err(), constant);
        let Ok(m) = fit else { return Ok(()) };
        for f in [&m.time_factors, &m.asset_factors, &m.feature_factors] {
            let g = f.transpose() * f;
            prop_assert!((g - DMatrix::identity(f.ncols(), f.ncols())).norm() < 1e-9);
        }
    }

    #[test]
    fn aggregated_rows_stay_on_simplex(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..30)) {
        let tax = Taxonomy::from_names(&["a", "b", "c", "d"]).unwrap();
        let chunks: Vec<ChunkScores> = raw
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let s: f64 = v.iter().sum();
                ChunkScores {
                    entity: format!("E{}", i % 3),
                    chunk_id: i as u64,
                    method: "m".into(),
                    scores: v.iter().map(|x| x / s).collect(),
                }
            })
            .collect();
        let m = aggregate_claims(&chunks, &tax, &AggregateOptions::default()).unwrap();
        for row in m.values.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn permutation_p_value_is_a_probability_and_reproducible() {
    let a = DMatrix::from_fn(20, 3, |i, j| ((i * 7 + j * 3) % 11) as f64);
    let b = DMatrix::from_fn(20, 2, |i, j| ((i * 5 + j) % 13) as f64);
    let opts = PermutationOptions { permutations: 150, seed: 9, smoothed: true };
    let m = Metric::Phi(DimMode::Pad);
    let r1 = permutation_test(&a, &b, &m, &opts).unwrap();
    let r2 = permutation_test(&a, &b, &m, &opts).unwrap();
    assert_eq!(r1, r2);
    assert!((0.0..=1.0).contains(&r1.p_value));
    assert!(r1.smoothed_p_value.unwrap() > r1.p_value || r1.p_value == 1.0);
}

#[test]
fn loo_impacts_match_from_scratch_refits() {
    let a = DMatrix::from_fn(9, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
    let b = DMatrix::from_fn(9, 2, |i, j| ((i * 5 + j * 2) % 13) as f64 - 6.0);
    let names = labels(9);
    let m = Metric::Phi(DimMode::Pad);
    let rep = leave_one_out(&a, &b, &names, &m).unwrap();
    let full = m.score(&a, &b).unwrap();
    for e in &rep.impacts {
        let i = names.iter().position(|n| n == &e.entity).unwrap();
        let keep: Vec<usize> = (0..9).filter(|&k| k != i).collect();
        let without = m.score(&a.select_rows(&keep), &b.select_rows(&keep)).unwrap();
        assert!((e.impact - (full - without)).abs() < 1e-12);
    }
}
