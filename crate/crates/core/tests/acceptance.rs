//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the pass/fail lines always reach the
//! terminal. Criterion 9 needs the public dataset and is skipped unless
//! `TENSOR_ALIGN_DATASET_CONFIG` points at a study config for it.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tensor_align::align::{
    distance_correlation, first_canonical_correlation, procrustes, rv_coefficient, tucker_phi, DimMode, Metric,
};
use tensor_align::decompose::{cp_als, factor_congruence, CpOptions};
use tensor_align::inference::{
    bonferroni, disattenuate, permutation_test, power_simulation, PermutationOptions, PowerOptions,
};
use tensor_align::stats::{build_stats_matrix, StatsOptions};
use tensor_align::synthetic::{random_claims, synth_market, MarketSpec};
use tensor_align::tensor::{build_tensor, prepare, synth_tensor, BuildOptions, HourlyGrid, Normalization};

type Check = Result<String, String>;

fn gaussian(n: usize, p: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| r.sample(StandardNormal))
}

fn random_orthogonal(p: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let qr = gaussian(p, p, r).qr();
    let (mut q, rr) = (qr.q(), qr.r());
    for k in 0..p {
        if rr[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn loss(a: &DMatrix<f64>, q: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a * q - b).norm_squared()
}

fn procrustes_optimality() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::NEG_INFINITY;
    for pair in 0..200 {
        let p = 2 + pair % 3;
        let a = gaussian(37, p, &mut r);
        let b = gaussian(37, p, &mut r);
        let q = procrustes(&a, &b).map_err(|e| e.to_string())?.q;
        let best = loss(&a, &q, &b);
        let candidates: Box<dyn Iterator<Item = DMatrix<f64>>> = if p == 2 {
            Box::new((0..10_000).map(|k| {
                let t = std::f64::consts::TAU * k as f64 / 10_000.0;
                DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()])
            }))
        } else {
            let mut rr = ChaCha8Rng::seed_from_u64(1000 + pair as u64);
            Box::new((0..10_000).map(move |_| random_orthogonal(p, &mut rr)))
        };
        for c in candidates {
            let gap = best - loss(&a, &c, &b);
            worst = worst.max(gap);
            if gap > 1e-9 {
                return Err(format!("pair {pair} (p = {p}): candidate beats SVD solution by {gap:e}"));
            }
        }
    }
    Ok(format!("200 pairs x 10000 candidates, max excess {worst:.2e}"))
}

fn phi_axioms() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = r.random_range(2..40);
        let x: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let c: f64 = r.random_range(-100.0..100.0);
        let phi = |a: &[f64], b: &[f64]| tucker_phi(a, b).unwrap().value;
        let base = phi(&x, &y);
        if !(-1.0..=1.0).contains(&base) {
            violations += 1;
        }
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        if (phi(&cx, &y) - c.signum() * base).abs() > 1e-12 {
            violations += 1;
        }
        let s = c.abs() + 1e-3;
        let sx: Vec<f64> = x.iter().map(|v| s * v).collect();
        if (phi(&x, &sx) - 1.0).abs() > 1e-12 {
            violations += 1;
        }
        // Independent Gaussian draws are never collinear.
        if base >= 1.0 - 1e-12 {
            violations += 1;
        }
    }
    if violations == 0 {
        Ok("10000 pairs, 0 violations".into())
    } else {
        Err(format!("{violations} violations"))
    }
}

fn cp_recovery() -> Check {
    let (t, planted) = synth_tensor([200, 20, 5], 2, 0.05, 3).map_err(|e| e.to_string())?;
    let model = cp_als(t.values(), &CpOptions::new(2)).map_err(|e| e.to_string())?;
    let phi = factor_congruence(&planted.asset_factors, &model.asset_factors)
        .map_err(|e| e.to_string())?
        .mean_abs_phi;
    let rises = model
        .error_trace
        .windows(2)
        .filter(|w| w[1] > w[0] * (1.0 + 1e-12))
        .count();
    let mut fits = Vec::new();
    for seed in 0..10 {
        fits.push(cp_als(t.values(), &CpOptions::new(2).seed(seed)).map_err(|e| e.to_string())?);
    }
    let mut min_pair = 1.0f64;
    for i in 0..fits.len() {
        for j in i + 1..fits.len() {
            let m = factor_congruence(&fits[i].asset_factors, &fits[j].asset_factors).map_err(|e| e.to_string())?;
            min_pair = min_pair.min(m.mean_abs_phi);
        }
    }
    let msg = format!(
        "EV {:.4}, planted phi {:.4}, error rises {rises}, min seed-pair phi {min_pair:.6}",
        model.explained_variance, phi
    );
    if model.explained_variance >= 0.90 && phi >= 0.99 && rises == 0 && min_pair >= 0.999 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn calibration_asymmetry() -> Check {
    let (records, _) = synth_market(&MarketSpec::new(37, 2000, 42));
    let assets: Vec<String> = (0..37).map(tensor_align::synthetic::asset_name).collect();
    let grid = HourlyGrid::spanning(&records).map_err(|e| e.to_string())?;
    let raw = build_tensor(&records, &assets, &grid, &BuildOptions::default()).map_err(|e| e.to_string())?;
    let x = prepare(&raw, Normalization::FeatureZ).map_err(|e| e.to_string())?;
    let factors = cp_als(x.values(), &CpOptions::new(2))
        .map_err(|e| e.to_string())?
        .weighted_asset_factors();
    let stats = build_stats_matrix(&raw, &StatsOptions::default()).map_err(|e| e.to_string())?;
    let metric = Metric::Phi(DimMode::Pad);
    let sf = permutation_test(&stats.values, &factors, &metric, &PermutationOptions::default())
        .map_err(|e| e.to_string())?;
    let mut quiet = 0;
    for trial in 0..20u64 {
        let claims = random_claims(37, 10, 1000 + trial);
        let opts = PermutationOptions {
            seed: 42 + trial,
            ..Default::default()
        };
        let p = permutation_test(&claims, &factors, &metric, &opts).map_err(|e| e.to_string())?;
        if p.p_value > 0.05 {
            quiet += 1;
        }
    }
    let msg = format!(
        "statistics-factors phi {:.3} p {:.3}; random claims non-significant in {quiet}/20",
        sf.observed, sf.p_value
    );
    if sf.p_value < 0.01 && quiet >= 17 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn power_table() -> Check {
    let rows = power_simulation(&PowerOptions::default()).map_err(|e| e.to_string())?;
    let reference = [(0.30, 0.14), (0.50, 0.45), (0.65, 0.70), (0.70, 0.90)];
    let mut parts = Vec::new();
    let mut ok = true;
    for (phi, want) in reference {
        let row = rows
            .iter()
            .find(|r| (r.true_phi - phi).abs() < 1e-12)
            .ok_or(format!("no row for {phi}"))?;
        ok &= (row.power - want).abs() <= 0.10;
        parts.push(format!("{phi:.2}: {:.1}% (ref {:.0}%)", 100.0 * row.power, 100.0 * want));
    }
    let msg = parts.join(", ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn corrections() -> Check {
    let d = disattenuate(0.058, 0.30, 0.95).map_err(|e| e.to_string())?;
    let b = bonferroni(&[0.5; 38], 0.05).map_err(|e| e.to_string())?;
    let msg = format!("disattenuated {:.4}, bonferroni {:.7}", d.value, b.alpha_corrected);
    if (d.value - 0.109).abs() <= 0.001 && (b.alpha_corrected - 0.001316).abs() <= 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Textbook dCor: full double-centered distance matrices, nested loops.
fn naive_dcor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let dist = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| (m.row(i) - m.row(j)).norm()).collect())
            .collect()
    };
    let centered = |d: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let row: Vec<f64> = d.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let grand = row.iter().sum::<f64>() / n as f64;
        (0..n)
            .map(|i| (0..n).map(|j| d[i][j] - row[i] - row[j] + grand).collect())
            .collect()
    };
    let (x, y) = (centered(dist(a)), centered(dist(b)));
    let dot = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += p[i][j] * q[i][j];
            }
        }
        s / (n * n) as f64
    };
    (dot(&x, &y) / (dot(&x, &x) * dot(&y, &y)).sqrt()).sqrt()
}

fn metric_oracles() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(37, 4, &mut r);
    let rv = rv_coefficient(&x, &x).map_err(|e| e.to_string())?;
    let dc = distance_correlation(&x, &x).map_err(|e| e.to_string())?;
    if (rv - 1.0).abs() > 1e-12 || (dc - 1.0).abs() > 1e-12 {
        return Err(format!("self-similarity RV {rv}, dCor {dc}"));
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(5..40);
        let a = gaussian(n, r.random_range(1..6), &mut r);
        let b = gaussian(n, r.random_range(1..6), &mut r);
        let ours = distance_correlation(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((ours - naive_dcor(&a, &b)).abs());
    }
    if worst > 1e-10 {
        return Err(format!("dCor differs from the naive form by {worst:e}"));
    }
    let a = gaussian(100, 3, &mut r);
    let w = gaussian(3, 3, &mut r);
    let cca = first_canonical_correlation(&a, &(&a * w)).map_err(|e| e.to_string())?.value;
    if cca < 1.0 - 1e-6 {
        return Err(format!("CCA on a linear map gives {cca}"));
    }
    Ok(format!("RV 1, dCor 1, dCor oracle gap {worst:.1e}, CCA {cca:.9}"))
}

fn null_size() -> Check {
    let metric = Metric::Phi(DimMode::Pad);
    let mut rejected = 0;
    for trial in 0..200u64 {
        let a = random_claims(37, 10, 5000 + trial);
        let mut r = ChaCha8Rng::seed_from_u64(9000 + trial);
        let b = gaussian(37, 2, &mut r);
        let opts = PermutationOptions {
            permutations: 200,
            seed: trial,
            smoothed: false,
        };
        if permutation_test(&a, &b, &metric, &opts).map_err(|e| e.to_string())?.p_value < 0.05 {
            rejected += 1;
        }
    }
    let size = rejected as f64 / 200.0;
    let msg = format!("rejection rate {size:.3} over 200 null trials");
    if (0.02..=0.09).contains(&size) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn dataset_replication(config: &str) -> Check {
    let cfg = tensor_align::study::validate_config(config).map_err(|e| e.to_string())?;
    let bundle = tensor_align::study::run_study(&cfg).map_err(|e| e.to_string())?;
    let s = &bundle.summary;
    let mut problems = Vec::new();
    for (pair, want) in [("claims_statistics", 0.246), ("claims_factors", 0.058), ("statistics_factors", 0.174)] {
        let got = s.alignment.iter().find(|p| p.pair == pair).map(|p| p.mean_abs_phi);
        match got {
            Some(v) if (v - want).abs() <= 0.02 => {}
            other => problems.push(format!("{pair}: {other:?} vs {want}")),
        }
    }
    for (rank, want) in [(1, 0.794), (2, 0.925), (3, 0.925), (4, 0.981), (5, 0.981)] {
        match s.rank_curve.iter().find(|r| r.rank == rank) {
            Some(r) if (r.explained_variance - want).abs() <= 0.005 => {}
            other => problems.push(format!("EV rank {rank}: {:?} vs {want}", other.map(|r| r.explained_variance))),
        }
    }
    match &s.rolling {
        Some(r) if (r.mean - 0.162).abs() <= 0.03 => {}
        other => problems.push(format!("rolling mean {:?} vs 0.162", other.as_ref().map(|r| r.mean))),
    }
    if problems.is_empty() {
        Ok("headline values, EV curve and rolling mean within tolerance".into())
    } else {
        Err(problems.join("; "))
    }
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 8] = [
        ("procrustes optimality", procrustes_optimality),
        ("congruence axioms", phi_axioms),
        ("CP recovery and seed stability", cp_recovery),
        ("calibration asymmetry", calibration_asymmetry),
        ("power table", power_table),
        ("disattenuation and Bonferroni", corrections),
        ("alternative metric oracles", metric_oracles),
        ("null size", null_size),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let res = check();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("criterion {}: PASS {name} ({secs:.1}s): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    match std::env::var("TENSOR_ALIGN_DATASET_CONFIG") {
        Ok(path) => match dataset_replication(&path) {
            Ok(msg) => println!("criterion 9: PASS dataset replication: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion 9: FAIL dataset replication: {msg}");
            }
        },
        Err(_) => println!("criterion 9: SKIP dataset replication (TENSOR_ALIGN_DATASET_CONFIG not set)"),
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
