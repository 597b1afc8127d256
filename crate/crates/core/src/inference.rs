//! Permutation and bootstrap inference, power simulation and the robustness
//! battery (leave-one-out, ablation, rolling windows, split samples,
//! stability checks, corrections).
//!
//! Every random draw comes from a stream keyed by the seed and the
//! iteration index, so results do not depend on the number of worker threads.

use chrono::{DateTime, Months, Utc};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::align::{align, AlignmentResult, DimMode, Metric};
use crate::decompose::{cp_als, factor_congruence, CpModel, CpOptions};
use crate::describe::{mean, pearson, percentile_interval, sample_std, skewness};
use crate::error::{Error, Result};
use crate::linalg::{drop_column, select_rows};
use crate::rng;
use crate::stats::{raw_stats_matrix, StatsOptions};
use crate::tensor::{prepare, MarketTensor, Normalization};

pub const DEFAULT_PERMUTATIONS: usize = 1000;
pub const DEFAULT_RESAMPLES: usize = 1000;

fn permuted_rows(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    select_rows(m, perm)
}

fn random_permutation(n: usize, seed: u64, index: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, index));
    perm
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationReport {
    pub metric: String,
    pub observed: f64,
    pub null_samples: Vec<f64>,
    /// `#{null ≥ observed} / B`.
    pub p_value: f64,
    /// `(#{null ≥ observed} + 1) / (B + 1)`, only when requested.
    pub smoothed_p_value: Option<f64>,
    pub permutations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct PermutationOptions {
    pub permutations: usize,
    pub seed: u64,
    pub smoothed: bool,
}

impl Default for PermutationOptions {
    fn default() -> Self {
        Self {
            permutations: DEFAULT_PERMUTATIONS,
            seed: rng::DEFAULT_SEED,
            smoothed: false,
        }
    }
}

/// One-sided permutation test of `metric(a, b)` against row permutations of
/// `b`. Procrustes (when the metric uses it) is refit for every permutation.
pub fn permutation_test(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    metric: &Metric,
    opts: &PermutationOptions,
) -> Result<PermutationReport> {
    if opts.permutations < 100 {
        return Err(Error::invalid("permutations", "must be at least 100"));
    }
    let observed = metric.score(a, b)?;
    let n = b.nrows();
    let null_samples = (0..opts.permutations as u64)
        .into_par_iter()
        .map(|i| metric.score(a, &permuted_rows(b, &random_permutation(n, opts.seed, i))))
        .collect::<Result<Vec<_>>>()?;
    let hits = null_samples.iter().filter(|&&s| s >= observed).count();
    let bn = opts.permutations as f64;
    Ok(PermutationReport {
        metric: metric.name().into(),
        observed,
        null_samples,
        p_value: hits as f64 / bn,
        smoothed_p_value: opts.smoothed.then(|| (hits as f64 + 1.0) / (bn + 1.0)),
        permutations: opts.permutations,
        seed: opts.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapReport {
    pub metric: String,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
    pub bootstrap_mean: f64,
    /// Bootstrap mean minus the point estimate.
    pub bias: f64,
    pub skewness: f64,
}

/// Percentile bootstrap over entity rows, resampled jointly in `a` and `b`.
pub fn bootstrap_ci(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    metric: &Metric,
    resamples: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapReport> {
    if resamples < 200 {
        return Err(Error::invalid("resamples", "must be at least 200"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("level", "must lie in (0, 1)"));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::Shape("row counts differ".into()));
    }
    let estimate = metric.score(a, b)?;
    let n = a.nrows();
    let samples = (0..resamples as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i);
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            metric.score(&select_rows(a, &idx), &select_rows(b, &idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = percentile_interval(&samples, level);
    let bootstrap_mean = mean(&samples);
    Ok(BootstrapReport {
        metric: metric.name().into(),
        estimate,
        lo,
        hi,
        level,
        resamples,
        seed,
        bootstrap_mean,
        bias: bootstrap_mean - estimate,
        skewness: skewness(&samples),
    })
}

/// Shape of the paired matrices used in the power simulation: `dims`
/// columns, of which the first `planted` carry congruence exactly `φ`; the
/// rest are independent in the two matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerDesign {
    pub dims: usize,
    pub planted: usize,
}

impl Default for PowerDesign {
    fn default() -> Self {
        Self { dims: 7, planted: 2 }
    }
}

fn unit_gaussian(n: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Matrices `(a, b)` with `b_j = φ a_j + √(1−φ²) ε_j` on planted columns,
/// where `ε_j` is orthogonalized against `a_j` and unit-normalized, so
/// `φ(a_j, b_j) = φ` exactly.
pub fn planted_pair(n: usize, design: &PowerDesign, phi: f64, r: &mut impl Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(n, design.dims);
    let mut b = DMatrix::zeros(n, design.dims);
    for j in 0..design.dims {
        let aj = unit_gaussian(n, r);
        let bj = if j < design.planted {
            let mut e = unit_gaussian(n, r);
            let d: f64 = e.iter().zip(&aj).map(|(x, y)| x * y).sum();
            e.iter_mut().zip(&aj).for_each(|(x, y)| *x -= d * y);
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = (1.0 - phi * phi).max(0.0).sqrt();
            aj.iter().zip(&e).map(|(x, y)| phi * x + s * y / norm).collect()
        } else {
            unit_gaussian(n, r)
        };
        a.set_column(j, &nalgebra::DVector::from_vec(aj));
        b.set_column(j, &nalgebra::DVector::from_vec(bj));
    }
    (a, b)
}

#[derive(Debug, Clone)]
pub struct PowerOptions {
    pub n: usize,
    pub effect_sizes: Vec<f64>,
    pub iterations: usize,
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
    pub design: PowerDesign,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self {
            n: 37,
            effect_sizes: vec![0.0, 0.3, 0.5, 0.65, 0.7],
            iterations: 500,
            permutations: 200,
            alpha: 0.05,
            seed: rng::DEFAULT_SEED,
            design: PowerDesign::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerRow {
    pub true_phi: f64,
    pub power: f64,
    /// Monte Carlo standard error of `power`.
    pub mc_se: f64,
    pub mc_iters: usize,
    pub perms_per_iter: usize,
    pub n: usize,
}

/// Rejection rate at `alpha` of the mean-|φ| permutation test on planted pairs.
pub fn power_simulation(opts: &PowerOptions) -> Result<Vec<PowerRow>> {
    if opts.iterations < 100 {
        return Err(Error::invalid("iterations", "must be at least 100"));
    }
    if opts.design.planted > opts.design.dims || opts.design.dims == 0 {
        return Err(Error::invalid("design", "planted columns must not exceed dims"));
    }
    if opts.n < opts.design.dims.max(3) {
        return Err(Error::invalid("n", "must be at least the number of dims"));
    }
    let metric = Metric::Phi(DimMode::Pad);
    opts.effect_sizes
        .iter()
        .enumerate()
        .map(|(e, &phi)| {
            if !(0.0..=1.0).contains(&phi) {
                return Err(Error::invalid("effect_sizes", "must lie in [0, 1]"));
            }
            let rejections = (0..opts.iterations as u64)
                .into_par_iter()
                .map(|it| {
                    let mut r = rng::substream(opts.seed, &[e as u64, it]);
                    let (a, b) = planted_pair(opts.n, &opts.design, phi, &mut r);
                    let p = PermutationOptions {
                        permutations: opts.permutations,
                        seed: rng::key(&[opts.seed, e as u64, it, 1]),
                        smoothed: false,
                    };
                    permutation_test(&a, &b, &metric, &p).map(|rep| rep.p_value < opts.alpha)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|&x| x)
                .count();
            let power = rejections as f64 / opts.iterations as f64;
            Ok(PowerRow {
                true_phi: phi,
                power,
                mc_se: (power * (1.0 - power) / opts.iterations as f64).sqrt(),
                mc_iters: opts.iterations,
                perms_per_iter: opts.permutations,
                n: opts.n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityImpact {
    pub entity: String,
    /// Full-sample score minus the score without this entity.
    pub impact: f64,
    pub score_without: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LooReport {
    pub full: f64,
    /// Sorted by impact, largest first.
    pub impacts: Vec<EntityImpact>,
}

impl LooReport {
    pub fn top(&self, k: usize) -> &[EntityImpact] {
        &self.impacts[..k.min(self.impacts.len())]
    }

    pub fn bottom(&self, k: usize) -> &[EntityImpact] {
        &self.impacts[self.impacts.len().saturating_sub(k)..]
    }
}

pub fn leave_one_out(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    labels: &[String],
    metric: &Metric,
) -> Result<LooReport> {
    let n = a.nrows();
    if n < 3 {
        return Err(Error::invalid("a", "need at least three entities"));
    }
    if labels.len() != n || b.nrows() != n {
        return Err(Error::Shape("labels and matrices disagree on entity count".into()));
    }
    let full = metric.score(a, b)?;
    let mut impacts = (0..n)
        .into_par_iter()
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let s = metric.score(&select_rows(a, &keep), &select_rows(b, &keep))?;
            Ok(EntityImpact {
                entity: labels[i].clone(),
                impact: full - s,
                score_without: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    impacts.sort_by(|x, y| y.impact.total_cmp(&x.impact).then(x.entity.cmp(&y.entity)));
    Ok(LooReport { full, impacts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryImpact {
    pub category: String,
    pub impact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub full: f64,
    /// Sorted by impact, largest first.
    pub impacts: Vec<CategoryImpact>,
}

/// Drop one claims column at a time and re-score against `target`.
pub fn feature_ablation(
    claims: &DMatrix<f64>,
    categories: &[String],
    target: &DMatrix<f64>,
    metric: &Metric,
) -> Result<AblationReport> {
    let k = claims.ncols();
    if k < 2 {
        return Err(Error::invalid("claims", "need at least two categories"));
    }
    if categories.len() != k {
        return Err(Error::Shape("category labels do not match claims width".into()));
    }
    let full = metric.score(claims, target)?;
    let mut impacts = (0..k)
        .into_par_iter()
        .map(|j| {
            let s = metric.score(&drop_column(claims, j), target)?;
            Ok(CategoryImpact {
                category: categories[j].clone(),
                impact: full - s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    impacts.sort_by(|x, y| y.impact.total_cmp(&x.impact).then(x.category.cmp(&y.category)));
    Ok(AblationReport { full, impacts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowUnit {
    Hours,
    Months,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
    pub unit: WindowUnit,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            length: 6,
            stride: 3,
            unit: WindowUnit::Months,
        }
    }
}

/// Index ranges of every full window on an hourly time axis. A window is
/// full when it ends no later than one hour past the last label.
pub fn window_bounds(times: &[DateTime<Utc>], spec: &WindowSpec) -> Result<Vec<std::ops::Range<usize>>> {
    if spec.length == 0 || spec.stride == 0 {
        return Err(Error::invalid("window", "length and stride must be positive"));
    }
    if times.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    match spec.unit {
        WindowUnit::Hours => {
            let mut s = 0;
            while s + spec.length <= times.len() {
                out.push(s..s + spec.length);
                s += spec.stride;
            }
        }
        WindowUnit::Months => {
            let origin = times[0];
            let limit = *times.last().unwrap() + chrono::Duration::hours(1);
            let first_at_or_after = |t: DateTime<Utc>| times.partition_point(|x| *x < t);
            for k in 0.. {
                let start = origin + Months::new((k * spec.stride) as u32);
                let end = start + Months::new(spec.length as u32);
                if end > limit {
                    break;
                }
                out.push(first_at_or_after(start)..first_at_or_after(end));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowResult {
    pub index: usize,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    /// Claims against the window's statistics.
    pub claims_stats: f64,
    pub per_dim_phi: Vec<f64>,
    /// Claims against factors refit on the window, when requested.
    pub claims_factors: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RollingReport {
    pub windows: Vec<WindowResult>,
    /// `(window index, reason)` for windows that could not be scored.
    pub skipped: Vec<(usize, String)>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct RollingOptions {
    pub window: WindowSpec,
    pub stats: StatsOptions,
    pub dim_mode: DimMode,
    /// Refit CP factors per window with these options.
    pub refit: Option<CpOptions>,
    pub normalization: Normalization,
}

impl Default for RollingOptions {
    fn default() -> Self {
        Self {
            window: WindowSpec::default(),
            stats: StatsOptions::default(),
            dim_mode: DimMode::Pad,
            refit: None,
            normalization: Normalization::FeatureZ,
        }
    }
}

/// Alignment of a fixed claims matrix (rows matching the tensor's assets)
/// against statistics recomputed in each window.
pub fn rolling_alignment(raw: &MarketTensor, claims: &DMatrix<f64>, opts: &RollingOptions) -> Result<RollingReport> {
    if claims.nrows() != raw.shape()[1] {
        return Err(Error::Shape("claims rows must match tensor assets".into()));
    }
    let bounds = window_bounds(raw.time_labels(), &opts.window)?;
    if bounds.is_empty() {
        return Err(Error::invalid("window", "longer than the time axis"));
    }
    let scored: Vec<std::result::Result<WindowResult, String>> = bounds
        .par_iter()
        .enumerate()
        .map(|(index, range)| {
            let w = raw.time_slice(range.clone());
            let run = || -> Result<WindowResult> {
                let stats = raw_stats_matrix(&w, &opts.stats)?.normalize()?;
                let res = align(claims, &stats.values, opts.dim_mode)?;
                let claims_factors = match &opts.refit {
                    Some(cp) => {
                        let x = prepare(&w, opts.normalization)?;
                        let m = cp_als(x.values(), cp)?;
                        Some(align(claims, &m.weighted_asset_factors(), opts.dim_mode)?.mean_abs_phi)
                    }
                    None => None,
                };
                Ok(WindowResult {
                    index,
                    start: w.time_labels()[0],
                    end: *w.time_labels().last().unwrap(),
                    claims_stats: res.mean_abs_phi,
                    per_dim_phi: res.per_dim_phi,
                    claims_factors,
                })
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in scored.into_iter().enumerate() {
        match r {
            Ok(w) => windows.push(w),
            Err(e) => {
                log::warn!("window {i} skipped: {e}");
                skipped.push((i, e));
            }
        }
    }
    let scores: Vec<f64> = windows.iter().map(|w| w.claims_stats).collect();
    let (mean_v, sd) = match scores.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (scores[0], 0.0),
        _ => (mean(&scores), sample_std(&scores)),
    };
    Ok(RollingReport {
        windows,
        skipped,
        mean: mean_v,
        sd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitDirection {
    /// e.g. `"factors_h1_vs_stats_h2"`.
    pub direction: String,
    pub mean_abs_phi: f64,
    pub per_dim_phi: Vec<f64>,
    pub p_value: f64,
    pub factor_ev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSampleReport {
    pub split_index: usize,
    pub forward: SplitDirection,
    pub reverse: SplitDirection,
}

#[derive(Debug, Clone)]
pub struct SplitOptions {
    pub cp: CpOptions,
    pub stats: StatsOptions,
    pub normalization: Normalization,
    pub permutation: PermutationOptions,
    pub dim_mode: DimMode,
}

impl SplitOptions {
    pub fn new(rank: usize) -> Self {
        Self {
            cp: CpOptions::new(rank),
            stats: StatsOptions::default(),
            normalization: Normalization::FeatureZ,
            permutation: PermutationOptions::default(),
            dim_mode: DimMode::Pad,
        }
    }
}

/// Fit factors on one half of the time axis and compare them with
/// statistics from the other half, in both directions.
pub fn split_sample(raw: &MarketTensor, opts: &SplitOptions) -> Result<SplitSampleReport> {
    let t = raw.shape()[0];
    if t < 4 {
        return Err(Error::invalid("tensor", "need at least four time points"));
    }
    let mid = t / 2;
    let halves = [raw.time_slice(0..mid), raw.time_slice(mid..t)];
    let one = |fit: &MarketTensor, stat: &MarketTensor, direction: &str| -> Result<SplitDirection> {
        let model = cp_als(prepare(fit, opts.normalization)?.values(), &opts.cp)?;
        let factors = model.weighted_asset_factors();
        let stats = raw_stats_matrix(stat, &opts.stats)?.normalize()?;
        let metric = Metric::Phi(opts.dim_mode);
        let res = align(&stats.values, &factors, opts.dim_mode)?;
        let perm = permutation_test(&stats.values, &factors, &metric, &opts.permutation)?;
        Ok(SplitDirection {
            direction: direction.into(),
            mean_abs_phi: res.mean_abs_phi,
            per_dim_phi: res.per_dim_phi,
            p_value: perm.p_value,
            factor_ev: model.explained_variance,
        })
    };
    Ok(SplitSampleReport {
        split_index: mid,
        forward: one(&halves[0], &halves[1], "factors_h1_vs_stats_h2")?,
        reverse: one(&halves[1], &halves[0], "factors_h2_vs_stats_h1")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Disattenuated {
    pub value: f64,
    /// Value before clamping to `[-1, 1]`.
    pub raw: f64,
    pub clamped: bool,
}

/// Spearman's correction: `φ / √(rel_x · rel_y)`.
pub fn disattenuate(phi_obs: f64, rel_x: f64, rel_y: f64) -> Result<Disattenuated> {
    for (arg, r) in [("rel_x", rel_x), ("rel_y", rel_y)] {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::invalid(arg, "reliability must lie in (0, 1]"));
        }
    }
    let raw = phi_obs / (rel_x * rel_y).sqrt();
    Ok(Disattenuated {
        value: raw.clamp(-1.0, 1.0),
        raw,
        clamped: raw.abs() > 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bonferroni {
    pub alpha_corrected: f64,
    pub reject: Vec<bool>,
}

pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<Bonferroni> {
    if p_values.is_empty() {
        return Err(Error::invalid("p_values", "empty"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", "must lie in (0, 1)"));
    }
    let alpha_corrected = alpha / p_values.len() as f64;
    Ok(Bonferroni {
        alpha_corrected,
        reject: p_values.iter().map(|&p| p <= alpha_corrected).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadingCell {
    pub variable: String,
    pub factor: usize,
    /// `None` when either column is constant.
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadingTable {
    pub source: String,
    pub cells: Vec<LoadingCell>,
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Pearson r with its two-sided t-test p-value on `n − 2` degrees of freedom.
pub fn correlation_test(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let r = pearson(x, y)?;
    if n < 3.0 {
        return Some((r, f64::NAN));
    }
    let df = n - 2.0;
    if r.abs() >= 1.0 {
        return Some((r, 0.0));
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Some((r, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

/// Correlate every column of `m` with every factor column.
pub fn loading_table(source: &str, m: &DMatrix<f64>, labels: &[String], factors: &DMatrix<f64>) -> Result<LoadingTable> {
    if m.nrows() != factors.nrows() {
        return Err(Error::Shape(format!("{source}: row count differs from factors")));
    }
    let mut cells = Vec::new();
    for (j, label) in labels.iter().enumerate() {
        let x: Vec<f64> = m.column(j).iter().copied().collect();
        for r in 0..factors.ncols() {
            let y: Vec<f64> = factors.column(r).iter().copied().collect();
            let test = correlation_test(&x, &y);
            cells.push(LoadingCell {
                variable: label.clone(),
                factor: r + 1,
                r: test.map(|t| t.0),
                p_value: test.map(|t| t.1),
                stars: test.map_or("", |t| stars(t.1)).to_string(),
            });
        }
    }
    Ok(LoadingTable {
        source: source.into(),
        cells,
    })
}

/// Statistics-by-factor and claims-by-factor correlation tables.
pub fn factor_loading_decomposition(
    stats: &DMatrix<f64>,
    stat_labels: &[String],
    claims: &DMatrix<f64>,
    categories: &[String],
    factors: &DMatrix<f64>,
) -> Result<[LoadingTable; 2]> {
    Ok([
        loading_table("statistics", stats, stat_labels, factors)?,
        loading_table("claims", claims, categories, factors)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantPair {
    pub first: String,
    pub second: String,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub pairs: Vec<VariantPair>,
    pub mean_phi: f64,
    /// Agreement of the normalized-levels refit with a stored model.
    pub reproducibility: Option<f64>,
}

/// Refit CP on normalized levels, log returns and per-asset z-scores, and
/// compare asset factors across the three.
pub fn scaling_sensitivity(raw: &MarketTensor, cp: &CpOptions, stored: Option<&CpModel>) -> Result<ScalingReport> {
    let variants = [
        ("levels", Normalization::FeatureZ),
        ("returns", Normalization::Returns),
        ("asset_z", Normalization::PerAssetZ),
    ];
    let models = variants
        .par_iter()
        .map(|(_, n)| cp_als(prepare(raw, *n)?.values(), cp))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            pairs.push(VariantPair {
                first: variants[i].0.into(),
                second: variants[j].0.into(),
                phi: factor_congruence(&models[i].asset_factors, &models[j].asset_factors)?.mean_abs_phi,
            });
        }
    }
    let reproducibility = stored
        .map(|m| factor_congruence(&models[0].asset_factors, &m.asset_factors).map(|f| f.mean_abs_phi))
        .transpose()?;
    Ok(ScalingReport {
        mean_phi: pairs.iter().map(|p| p.phi).sum::<f64>() / pairs.len() as f64,
        pairs,
        reproducibility,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilitySummary {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub values: Vec<f64>,
}

fn summarize(values: Vec<f64>) -> StabilitySummary {
    StabilitySummary {
        mean: mean(&values),
        sd: if values.len() > 1 { sample_std(&values) } else { 0.0 },
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        values,
    }
}

/// Pairwise asset-factor congruence across CP fits with different seeds.
pub fn seed_stability(x: &crate::tensor::Tensor3, base: &CpOptions, seeds: &[u64]) -> Result<StabilitySummary> {
    if seeds.len() < 2 {
        return Err(Error::invalid("seeds", "need at least two seeds"));
    }
    let models = seeds
        .par_iter()
        .map(|&s| cp_als(x, &CpOptions { seed: s, ..*base }))
        .collect::<Result<Vec<_>>>()?;
    let mut phis = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            phis.push(factor_congruence(&models[i].asset_factors, &models[j].asset_factors)?.mean_abs_phi);
        }
    }
    Ok(summarize(phis))
}

/// Asset-factor congruence between CP fits on the two halves of the time axis.
pub fn temporal_stability(raw: &MarketTensor, cp: &CpOptions, norm: Normalization) -> Result<f64> {
    let t = raw.shape()[0];
    if t < 4 {
        return Err(Error::invalid("tensor", "need at least four time points"));
    }
    let h1 = cp_als(prepare(&raw.time_slice(0..t / 2), norm)?.values(), cp)?;
    let h2 = cp_als(prepare(&raw.time_slice(t / 2..t), norm)?.values(), cp)?;
    Ok(factor_congruence(&h1.asset_factors, &h2.asset_factors)?.mean_abs_phi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsampleReport {
    pub fraction: f64,
    pub summary: StabilitySummary,
    pub lo: f64,
    pub hi: f64,
}

/// Metric on random subsets of entity rows drawn without replacement.
pub fn subsample_stability(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    metric: &Metric,
    iterations: usize,
    fraction: f64,
    seed: u64,
) -> Result<SubsampleReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction", "must lie in (0, 1]"));
    }
    if iterations < 2 {
        return Err(Error::invalid("iterations", "need at least two"));
    }
    let n = a.nrows();
    let m = ((n as f64) * fraction).round() as usize;
    if m < 3 {
        return Err(Error::invalid("fraction", "subsample would have fewer than three rows"));
    }
    let values = (0..iterations as u64)
        .into_par_iter()
        .map(|i| {
            let mut idx = random_permutation(n, seed, i);
            idx.truncate(m);
            idx.sort_unstable();
            metric.score(&select_rows(a, &idx), &select_rows(b, &idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = percentile_interval(&values, 0.95);
    Ok(SubsampleReport {
        fraction,
        summary: summarize(values),
        lo,
        hi,
    })
}

/// Alignment plus its permutation test, as reported in the headline table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairReport {
    pub pair: String,
    pub mean_abs_phi: f64,
    pub per_dim_phi: Vec<f64>,
    pub padded_dims: usize,
    pub p_value: f64,
    pub ci: Option<(f64, f64)>,
    pub n_entities: usize,
}

pub fn pair_report(
    pair: &str,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mode: DimMode,
    perm: &PermutationOptions,
    bootstrap: Option<usize>,
) -> Result<PairReport> {
    let res: AlignmentResult = align(a, b, mode)?;
    let metric = Metric::Phi(mode);
    let p = permutation_test(a, b, &metric, perm)?;
    let ci = bootstrap
        .map(|resamples| bootstrap_ci(a, b, &metric, resamples, perm.seed, 0.95).map(|r| (r.lo, r.hi)))
        .transpose()?;
    Ok(PairReport {
        pair: pair.into(),
        mean_abs_phi: res.mean_abs_phi,
        per_dim_phi: res.per_dim_phi,
        padded_dims: res.padded_dims,
        p_value: p.p_value,
        ci,
        n_entities: res.n_entities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| r.sample(StandardNormal))
    }

    #[test]
    fn self_alignment_is_significant() {
        let a = gaussian(37, 3, 1);
        let rep = permutation_test(&a, &a, &Metric::default(), &PermutationOptions::default()).unwrap();
        assert!(rep.p_value <= 0.01);
        assert!((rep.observed - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permutation_is_thread_count_independent() {
        let a = gaussian(20, 3, 2);
        let b = gaussian(20, 3, 3);
        let opts = PermutationOptions {
            permutations: 200,
            ..Default::default()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| permutation_test(&a, &b, &Metric::default(), &opts).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn smoothed_p_is_opt_in() {
        let a = gaussian(10, 2, 4);
        let mut opts = PermutationOptions {
            permutations: 100,
            ..Default::default()
        };
        let plain = permutation_test(&a, &a, &Metric::default(), &opts).unwrap();
        assert!(plain.smoothed_p_value.is_none());
        opts.smoothed = true;
        let sm = permutation_test(&a, &a, &Metric::default(), &opts).unwrap();
        let hits = (plain.p_value * 100.0).round();
        assert_eq!(sm.smoothed_p_value, Some((hits + 1.0) / 101.0));
    }

    #[test]
    fn planted_pair_has_exact_congruence() {
        let mut r = rng::stream(5, 0);
        let (a, b) = planted_pair(37, &PowerDesign::default(), 0.6, &mut r);
        for j in 0..2 {
            let phi = crate::align::tucker_phi(a.column(j).as_slice(), b.column(j).as_slice()).unwrap();
            assert!((phi.value - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn disattenuation_cases() {
        assert_eq!(disattenuate(0.3, 1.0, 1.0).unwrap().value, 0.3);
        let d = disattenuate(0.9, 0.5, 0.5).unwrap();
        assert!(d.clamped && (d.raw - 1.8).abs() < 1e-12 && d.value == 1.0);
        assert!(disattenuate(0.3, 0.0, 1.0).is_err());
    }

    #[test]
    fn bonferroni_cases() {
        let b = bonferroni(&[0.001, 0.02], 0.05).unwrap();
        assert_eq!(b.reject, vec![true, true]);
        assert_eq!(bonferroni(&[0.2], 0.05).unwrap().alpha_corrected, 0.05);
        assert!(bonferroni(&[], 0.05).is_err());
    }

    #[test]
    fn hour_windows_tile_the_axis() {
        let start = DateTime::parse_from_rfc3339("2023-01-01T00:00:00Z").unwrap().with_timezone(&Utc);
        let times: Vec<_> = (0..10).map(|h| start + chrono::Duration::hours(h)).collect();
        let spec = WindowSpec {
            length: 4,
            stride: 3,
            unit: WindowUnit::Hours,
        };
        assert_eq!(window_bounds(&times, &spec).unwrap(), vec![0..4, 3..7, 6..10]);
    }

    #[test]
    fn stars_follow_thresholds() {
        assert_eq!(stars(0.0005), "***");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.02), "*");
        assert_eq!(stars(0.2), "");
    }
}
