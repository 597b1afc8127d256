//! Per-asset summary statistics and the cross-sectional statistics matrix.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::describe::{mean, sample_std};
use crate::error::{Error, Result};
use crate::tensor::{MarketTensor, Normalization};

/// Hourly bars per year under the 252-trading-day convention.
pub const ANNUALIZATION: f64 = 252.0 * 24.0;
pub const DEFAULT_VOL_WINDOW: usize = 168;

pub const STAT_NAMES: [&str; 7] = [
    "mean_return",
    "volatility",
    "sharpe",
    "max_drawdown",
    "avg_volume",
    "vol_of_vol",
    "trend",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnKind {
    Simple,
    Log,
}

#[derive(Debug, Clone, Copy)]
pub struct StatsOptions {
    pub returns: ReturnKind,
    /// Rolling window (in returns) for the volatility-of-volatility.
    pub vol_window: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            returns: ReturnKind::Simple,
            vol_window: DEFAULT_VOL_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatVector {
    pub mean_return: f64,
    pub volatility: f64,
    pub sharpe: f64,
    pub max_drawdown: f64,
    pub avg_volume: f64,
    pub vol_of_vol: f64,
    pub trend: f64,
}

impl StatVector {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.mean_return,
            self.volatility,
            self.sharpe,
            self.max_drawdown,
            self.avg_volume,
            self.vol_of_vol,
            self.trend,
        ]
    }
}

/// Most negative fractional decline from the running maximum (≤ 0).
pub fn max_drawdown(prices: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut mdd: f64 = 0.0;
    for &p in prices {
        peak = peak.max(p);
        mdd = mdd.min((p - peak) / peak);
    }
    mdd
}

/// OLS slope of `prices` on the index `0, 1, …`.
pub fn trend_slope(prices: &[f64]) -> f64 {
    let n = prices.len() as f64;
    let tbar = (n - 1.0) / 2.0;
    let pbar = mean(prices);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, p) in prices.iter().enumerate() {
        let dt = t as f64 - tbar;
        sxy += dt * (p - pbar);
        sxx += dt * dt;
    }
    sxy / sxx
}

pub fn compute_asset_stats(
    asset: &str,
    close: &[f64],
    volume: &[f64],
    opts: &StatsOptions,
) -> Result<StatVector> {
    let fail = |reason: String| Error::Asset {
        asset: asset.to_string(),
        reason,
    };
    if opts.vol_window < 2 {
        return Err(Error::invalid("vol_window", "must be at least 2"));
    }
    if close.len() < opts.vol_window + 2 {
        return Err(fail(format!(
            "{} prices, need at least {}",
            close.len(),
            opts.vol_window + 2
        )));
    }
    if close.len() != volume.len() {
        return Err(fail("close and volume lengths differ".into()));
    }
    if close.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(fail("non-positive or non-finite price".into()));
    }
    let returns: Vec<f64> = close
        .windows(2)
        .map(|w| match opts.returns {
            ReturnKind::Simple => w[1] / w[0] - 1.0,
            ReturnKind::Log => (w[1] / w[0]).ln(),
        })
        .collect();
    let mean_return = mean(&returns);
    let volatility = sample_std(&returns);
    if volatility == 0.0 {
        return Err(fail("constant price series, Sharpe ratio undefined".into()));
    }
    let rolling: Vec<f64> = returns.windows(opts.vol_window).map(sample_std).collect();
    Ok(StatVector {
        mean_return,
        volatility,
        sharpe: mean_return / volatility * ANNUALIZATION.sqrt(),
        max_drawdown: max_drawdown(close),
        avg_volume: mean(volume),
        vol_of_vol: sample_std(&rolling),
        trend: trend_slope(close),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsMatrix {
    pub values: DMatrix<f64>,
    pub asset_labels: Vec<String>,
    pub stat_labels: Vec<String>,
    pub normalized: bool,
}

/// Population z-score of each column. Fails on a constant column.
pub fn zscore_columns(m: &DMatrix<f64>, labels: &[String]) -> Result<DMatrix<f64>> {
    let means = crate::linalg::column_means(m);
    let sds = crate::linalg::column_pop_std(m);
    let bad: Vec<String> = sds
        .iter()
        .zip(&means)
        .enumerate()
        .filter(|(_, (sd, mu))| **sd <= 1e-12 * mu.abs().max(1e-300))
        .map(|(j, _)| labels.get(j).cloned().unwrap_or_else(|| format!("column {j}")))
        .collect();
    if !bad.is_empty() {
        return Err(Error::ZeroVariance(format!("statistics columns: {}", bad.join(", "))));
    }
    Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        (m[(i, j)] - means[j]) / sds[j]
    }))
}

/// Raw per-asset statistics (one row per asset).
pub fn raw_stats_matrix(t: &MarketTensor, opts: &StatsOptions) -> Result<StatsMatrix> {
    if t.normalization() != Normalization::Raw {
        return Err(Error::invalid("tensor", "statistics need the raw tensor"));
    }
    let close = t
        .feature_index("close")
        .ok_or_else(|| Error::invalid("tensor", "no `close` feature"))?;
    let vol = t
        .feature_index("volume")
        .ok_or_else(|| Error::invalid("tensor", "no `volume` feature"))?;
    let rows = t
        .asset_labels()
        .iter()
        .enumerate()
        .map(|(a, name)| compute_asset_stats(name, &t.series(a, close), &t.series(a, vol), opts))
        .collect::<Result<Vec<_>>>()?;
    let values = DMatrix::from_fn(rows.len(), 7, |i, j| rows[i].to_array()[j]);
    Ok(StatsMatrix {
        values,
        asset_labels: t.asset_labels().to_vec(),
        stat_labels: STAT_NAMES.iter().map(|s| s.to_string()).collect(),
        normalized: false,
    })
}

/// Statistics for every asset, z-scored across assets.
pub fn build_stats_matrix(t: &MarketTensor, opts: &StatsOptions) -> Result<StatsMatrix> {
    raw_stats_matrix(t, opts)?.normalize()
}

impl StatsMatrix {
    pub fn normalize(&self) -> Result<StatsMatrix> {
        Ok(StatsMatrix {
            values: zscore_columns(&self.values, &self.stat_labels)?,
            asset_labels: self.asset_labels.clone(),
            stat_labels: self.stat_labels.clone(),
            normalized: true,
        })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.stat_labels.iter().position(|s| s == name)?;
        Some(self.values.column(j).iter().copied().collect())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_labeled_matrix(path, "asset", &self.asset_labels, &self.stat_labels, &self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residualized {
    pub matrix: DMatrix<f64>,
    /// The covariate was constant, so columns were only demeaned.
    pub constant_covariate: bool,
}

/// Replace each column by its residual from OLS on `[1, covariate]`.
pub fn residualize(m: &DMatrix<f64>, covariate: &[f64]) -> Result<Residualized> {
    if covariate.len() != m.nrows() {
        return Err(Error::Shape(format!(
            "covariate has {} values for {} rows",
            covariate.len(),
            m.nrows()
        )));
    }
    let cbar = mean(covariate);
    let cc: Vec<f64> = covariate.iter().map(|c| c - cbar).collect();
    let sxx: f64 = cc.iter().map(|c| c * c).sum();
    let constant = sxx <= 1e-24 * cbar.abs().max(1.0).powi(2);
    if constant {
        log::warn!("residualization covariate is constant; columns only demeaned");
    }
    let mut out = crate::linalg::center_columns(m);
    if !constant {
        for mut col in out.column_iter_mut() {
            let beta = col.iter().zip(&cc).map(|(y, c)| y * c).sum::<f64>() / sxx;
            for (y, c) in col.iter_mut().zip(&cc) {
                *y -= beta * c;
            }
        }
    }
    Ok(Residualized {
        matrix: out,
        constant_covariate: constant,
    })
}
