//! The time × asset × feature market tensor.
//!
//! Entries are stored row-major over `(t, a, f)` with the feature index
//! fastest. Matricizations follow the Khatri-Rao pairing used by CP-ALS:
//!
//! | mode | rows  | column index     | pairs with |
//! |------|-------|------------------|------------|
//! | 1    | time  | `f * A + a`      | `C ⊙ B`    |
//! | 2    | asset | `f * T + t`      | `C ⊙ A`    |
//! | 3    | feat. | `a * T + t`      | `B ⊙ A`    |
//!
//! so `X_(1) (C ⊙ B)` needs no index permutation.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, Timelike, Utc};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decompose::CpModel;
use crate::error::{AssetCoverage, Error, Result};
use crate::rng;

pub const FEATURES: [&str; 5] = ["open", "high", "low", "close", "volume"];
pub const CLOSE: usize = 3;
pub const VOLUME: usize = 4;

/// One hourly bar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcvRecord {
    pub timestamp: DateTime<Utc>,
    pub asset: String,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcvRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().chain([&self.volume]).any(|x| !x.is_finite()) {
            return Err("non-finite value".into());
        }
        if prices.iter().any(|&p| p <= 0.0) {
            return Err("prices must be positive".into());
        }
        if self.volume < 0.0 {
            return Err("negative volume".into());
        }
        if self.high < self.open.max(self.close) {
            return Err("high below open/close".into());
        }
        if self.low > self.open.min(self.close) {
            return Err("low above open/close".into());
        }
        if self.timestamp.minute() != 0
            || self.timestamp.second() != 0
            || self.timestamp.nanosecond() != 0
        {
            return Err("timestamp is not hour-aligned".into());
        }
        Ok(())
    }

    fn values(&self) -> [f64; 5] {
        [self.open, self.high, self.low, self.close, self.volume]
    }
}

/// Read `timestamp,asset,open,high,low,close,volume` rows. Row numbers in
/// errors count data rows from 1.
pub fn read_ohlcv_csv(path: impl AsRef<Path>) -> Result<Vec<OhlcvRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ohlcv(file)
}

pub fn parse_ohlcv<R: Read>(reader: R) -> Result<Vec<OhlcvRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["timestamp", "asset", "open", "high", "low", "close", "volume"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Record {
            row: 0,
            reason: format!("expected header `{}`", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Record {
            row,
            reason: e.to_string(),
        })?;
        let bad = |reason: String| Error::Record { row, reason };
        let timestamp = DateTime::parse_from_rfc3339(&rec[0])
            .map_err(|e| bad(format!("timestamp `{}`: {e}", &rec[0])))?
            .with_timezone(&Utc);
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| bad(format!("{} `{}`: {e}", expected[k], &rec[k])))
        };
        out.push(OhlcvRecord {
            timestamp,
            asset: rec[1].to_string(),
            open: num(2)?,
            high: num(3)?,
            low: num(4)?,
            close: num(5)?,
            volume: num(6)?,
        });
    }
    Ok(out)
}

pub fn write_ohlcv_csv(path: impl AsRef<Path>, records: &[OhlcvRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "asset", "open", "high", "low", "close", "volume"])?;
    for r in records {
        w.write_record([
            r.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            r.asset.clone(),
            r.open.to_string(),
            r.high.to_string(),
            r.low.to_string(),
            r.close.to_string(),
            r.volume.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Contiguous hourly time range `[start, start + len h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HourlyGrid {
    pub start: DateTime<Utc>,
    pub len: usize,
}

impl HourlyGrid {
    pub fn new(start: DateTime<Utc>, len: usize) -> Result<Self> {
        if start.minute() != 0 || start.second() != 0 || start.nanosecond() != 0 {
            return Err(Error::invalid("grid", "start is not hour-aligned"));
        }
        if len == 0 {
            return Err(Error::invalid("grid", "empty grid"));
        }
        Ok(Self { start, len })
    }

    /// Smallest grid covering every record.
    pub fn spanning(records: &[OhlcvRecord]) -> Result<Self> {
        let lo = records.iter().map(|r| r.timestamp).min();
        let hi = records.iter().map(|r| r.timestamp).max();
        match (lo, hi) {
            (Some(lo), Some(hi)) => Self::new(lo, ((hi - lo).num_hours() + 1) as usize),
            _ => Err(Error::invalid("records", "no records")),
        }
    }

    pub fn at(&self, t: usize) -> DateTime<Utc> {
        self.start + Duration::hours(t as i64)
    }

    pub fn index_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let h = (ts - self.start).num_hours();
        (h >= 0 && (h as usize) < self.len && self.at(h as usize) == ts).then_some(h as usize)
    }

    pub fn labels(&self) -> Vec<DateTime<Utc>> {
        (0..self.len).map(|t| self.at(t)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Longest run of missing hours that is forward-filled.
    pub max_gap: usize,
    /// Minimum fraction of grid hours an asset must cover.
    pub min_coverage: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            max_gap: 3,
            min_coverage: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    FeatureZ,
    Returns,
    PerAssetZ,
}

/// Plain dense 3-way array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Sub-tensor over time indices `range`.
    pub fn time_slice(&self, range: std::ops::Range<usize>) -> Tensor3 {
        let [_, a, f] = self.shape;
        let data = self.data[range.start * a * f..range.end * a * f].to_vec();
        Tensor3 {
            shape: [range.len(), a, f],
            data,
        }
    }

    /// Sub-tensor keeping the listed asset indices.
    pub fn select_assets(&self, assets: &[usize]) -> Tensor3 {
        let [t, _, f] = self.shape;
        Tensor3::from_fn([t, assets.len(), f], |i, j, k| self.get(i, assets[j], k))
    }

    /// Mode-n product `self ×_n m` where `m` is `J × I_n`.
    pub fn mode_product(&self, m: &DMatrix<f64>, mode: Mode) -> Result<Tensor3> {
        let n = mode.axis();
        if m.ncols() != self.shape[n] {
            return Err(Error::Shape(format!(
                "mode-{} product needs {} columns, got {}",
                n + 1,
                self.shape[n],
                m.ncols()
            )));
        }
        let mut shape = self.shape;
        shape[n] = m.nrows();
        let mut out = Tensor3::zeros(shape);
        for i in 0..self.shape[0] {
            for j in 0..self.shape[1] {
                for k in 0..self.shape[2] {
                    let x = self.get(i, j, k);
                    if x == 0.0 {
                        continue;
                    }
                    let src = [i, j, k][n];
                    for r in 0..m.nrows() {
                        let mut idx = [i, j, k];
                        idx[n] = r;
                        let o = out.offset(idx[0], idx[1], idx[2]);
                        out.data[o] += m[(r, src)] * x;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Tensor axis, numbered 1..=3 in the usual multilinear-algebra convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Time,
    Asset,
    Feature,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Time, Mode::Asset, Mode::Feature];

    pub fn from_index(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Mode::Time),
            2 => Ok(Mode::Asset),
            3 => Ok(Mode::Feature),
            _ => Err(Error::invalid("mode", format!("{n} not in 1..=3"))),
        }
    }

    pub fn index(self) -> usize {
        self.axis() + 1
    }

    fn axis(self) -> usize {
        match self {
            Mode::Time => 0,
            Mode::Asset => 1,
            Mode::Feature => 2,
        }
    }
}

/// Mode-n unfolding of a [`Tensor3`].
#[derive(Debug, Clone, PartialEq)]
pub struct Matricization {
    pub matrix: DMatrix<f64>,
    pub mode: Mode,
    pub source_shape: [usize; 3],
}

pub fn matricize(t: &Tensor3, mode: Mode) -> Matricization {
    let [ti, ai, fi] = t.shape;
    let matrix = match mode {
        Mode::Time => DMatrix::from_fn(ti, ai * fi, |r, c| t.get(r, c % ai, c / ai)),
        Mode::Asset => DMatrix::from_fn(ai, ti * fi, |r, c| t.get(c % ti, r, c / ti)),
        Mode::Feature => DMatrix::from_fn(fi, ti * ai, |r, c| t.get(c % ti, c / ti, r)),
    };
    Matricization {
        matrix,
        mode,
        source_shape: t.shape,
    }
}

impl Matricization {
    pub fn refold(&self) -> Result<Tensor3> {
        let [ti, ai, fi] = self.source_shape;
        let m = &self.matrix;
        let expect = match self.mode {
            Mode::Time => (ti, ai * fi),
            Mode::Asset => (ai, ti * fi),
            Mode::Feature => (fi, ti * ai),
        };
        if m.shape() != expect {
            return Err(Error::Shape(format!(
                "matrix {:?} cannot refold to {:?} along mode {}",
                m.shape(),
                self.source_shape,
                self.mode.index()
            )));
        }
        Ok(Tensor3::from_fn(self.source_shape, |t, a, f| match self.mode {
            Mode::Time => m[(t, f * ai + a)],
            Mode::Asset => m[(a, f * ti + t)],
            Mode::Feature => m[(f, a * ti + t)],
        }))
    }
}

/// Column-wise Kronecker product: row `i * m + j` of column `r` is `a[i,r] * b[j,r]`.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let m = b.nrows();
    Ok(DMatrix::from_fn(a.nrows() * m, a.ncols(), |row, r| {
        a[(row / m, r)] * b[(row % m, r)]
    }))
}

/// Labeled market tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketTensor {
    values: Tensor3,
    time_labels: Vec<DateTime<Utc>>,
    asset_labels: Vec<String>,
    feature_labels: Vec<String>,
    normalization: Normalization,
}

impl MarketTensor {
    pub fn new(
        values: Tensor3,
        time_labels: Vec<DateTime<Utc>>,
        asset_labels: Vec<String>,
        feature_labels: Vec<String>,
        normalization: Normalization,
    ) -> Result<Self> {
        let [t, a, f] = values.shape();
        if time_labels.len() != t || asset_labels.len() != a || feature_labels.len() != f {
            return Err(Error::Shape(format!(
                "labels ({}, {}, {}) do not match values {:?}",
                time_labels.len(),
                asset_labels.len(),
                feature_labels.len(),
                values.shape()
            )));
        }
        if time_labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("time_labels", "not strictly increasing"));
        }
        if let Some(i) = values.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid("values", format!("non-finite entry at offset {i}")));
        }
        Ok(Self {
            values,
            time_labels,
            asset_labels,
            feature_labels,
            normalization,
        })
    }

    pub fn values(&self) -> &Tensor3 {
        &self.values
    }

    pub fn shape(&self) -> [usize; 3] {
        self.values.shape()
    }

    pub fn time_labels(&self) -> &[DateTime<Utc>] {
        &self.time_labels
    }

    pub fn asset_labels(&self) -> &[String] {
        &self.asset_labels
    }

    pub fn feature_labels(&self) -> &[String] {
        &self.feature_labels
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_labels.iter().position(|f| f == name)
    }

    /// Series of one feature for one asset.
    pub fn series(&self, asset: usize, feature: usize) -> Vec<f64> {
        (0..self.shape()[0])
            .map(|t| self.values.get(t, asset, feature))
            .collect()
    }

    pub fn time_slice(&self, range: std::ops::Range<usize>) -> MarketTensor {
        MarketTensor {
            values: self.values.time_slice(range.clone()),
            time_labels: self.time_labels[range].to_vec(),
            asset_labels: self.asset_labels.clone(),
            feature_labels: self.feature_labels.clone(),
            normalization: self.normalization,
        }
    }

    pub fn select_assets(&self, names: &[String]) -> Result<MarketTensor> {
        let idx = names
            .iter()
            .map(|n| {
                self.asset_labels
                    .iter()
                    .position(|a| a == n)
                    .ok_or_else(|| Error::invalid("assets", format!("unknown asset {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MarketTensor {
            values: self.values.select_assets(&idx),
            time_labels: self.time_labels.clone(),
            asset_labels: names.to_vec(),
            feature_labels: self.feature_labels.clone(),
            normalization: self.normalization,
        })
    }

    fn with_values(&self, values: Tensor3, normalization: Normalization) -> MarketTensor {
        MarketTensor {
            values,
            time_labels: self.time_labels.clone(),
            asset_labels: self.asset_labels.clone(),
            feature_labels: self.feature_labels.clone(),
            normalization,
        }
    }
}

/// Assemble the raw tensor from hourly bars on `grid`.
///
/// Gaps of up to `max_gap` hours become flat bars at the previous close with
/// zero volume (a gap at the very start uses the first observed open).
pub fn build_tensor(
    records: &[OhlcvRecord],
    assets: &[String],
    grid: &HourlyGrid,
    opts: &BuildOptions,
) -> Result<MarketTensor> {
    let col: HashMap<&str, usize> = assets
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    if col.len() != assets.len() {
        return Err(Error::invalid("assets", "duplicate tickers"));
    }
    let mut slots: Vec<Vec<Option<[f64; 5]>>> = vec![vec![None; grid.len]; assets.len()];
    for (row, rec) in records.iter().enumerate() {
        rec.validate().map_err(|reason| Error::Record { row, reason })?;
        let Some(&a) = col.get(rec.asset.as_str()) else {
            continue;
        };
        let Some(t) = grid.index_of(rec.timestamp) else {
            continue;
        };
        if slots[a][t].replace(rec.values()).is_some() {
            return Err(Error::Record {
                row,
                reason: format!("duplicate bar for {} at {}", rec.asset, rec.timestamp),
            });
        }
    }

    let mut failures = Vec::new();
    for (a, s) in slots.iter().enumerate() {
        let present = s.iter().filter(|x| x.is_some()).count();
        let coverage = present as f64 / grid.len as f64;
        let longest_gap = s
            .split(|x| x.is_some())
            .map(|run| run.len())
            .max()
            .unwrap_or(0);
        if coverage < opts.min_coverage || longest_gap > opts.max_gap {
            failures.push(AssetCoverage {
                asset: assets[a].clone(),
                coverage,
                longest_gap,
            });
        }
    }
    if !failures.is_empty() {
        return Err(Error::Coverage(failures));
    }

    let mut values = Tensor3::zeros([grid.len, assets.len(), FEATURES.len()]);
    for (a, s) in slots.iter().enumerate() {
        let first = s.iter().flatten().next().expect("coverage > 0");
        let mut last_close = first[0];
        for (t, bar) in s.iter().enumerate() {
            let v = match bar {
                Some(v) => {
                    last_close = v[CLOSE];
                    *v
                }
                None => [last_close, last_close, last_close, last_close, 0.0],
            };
            for (f, x) in v.into_iter().enumerate() {
                values.set(t, a, f, x);
            }
        }
    }
    MarketTensor::new(
        values,
        grid.labels(),
        assets.to_vec(),
        FEATURES.iter().map(|s| s.to_string()).collect(),
        Normalization::Raw,
    )
}

/// Population z-score of every feature slice over all `(t, a)` cells.
pub fn znormalize_slices(values: &Tensor3, labels: &[String]) -> Result<Tensor3> {
    let [t, a, f] = values.shape();
    let n = (t * a) as f64;
    let mut out = values.clone();
    for k in 0..f {
        let mut mean = 0.0;
        for i in 0..t {
            for j in 0..a {
                mean += values.get(i, j, k);
            }
        }
        mean /= n;
        let mut var = 0.0;
        for i in 0..t {
            for j in 0..a {
                var += (values.get(i, j, k) - mean).powi(2);
            }
        }
        var /= n;
        let scale = mean.abs().max(1.0);
        if var.sqrt() <= 1e-12 * scale {
            return Err(Error::ZeroVariance(format!(
                "feature `{}`",
                labels.get(k).map(String::as_str).unwrap_or("?")
            )));
        }
        let sd = var.sqrt();
        for i in 0..t {
            for j in 0..a {
                out.set(i, j, k, (values.get(i, j, k) - mean) / sd);
            }
        }
    }
    Ok(out)
}

pub fn znormalize_feature_slices(t: &MarketTensor) -> Result<MarketTensor> {
    if !matches!(t.normalization, Normalization::Raw | Normalization::FeatureZ) {
        return Err(Error::invalid(
            "tensor",
            format!("expected raw levels, got {:?}", t.normalization),
        ));
    }
    let values = znormalize_slices(&t.values, &t.feature_labels)?;
    Ok(t.with_values(values, Normalization::FeatureZ))
}

/// Log-differences along time. Volume uses `ln((v_t + 1) / (v_{t-1} + 1))`
/// so zero-volume fill bars stay finite.
pub fn log_returns(t: &MarketTensor) -> Result<MarketTensor> {
    if t.normalization != Normalization::Raw {
        return Err(Error::invalid("tensor", "log returns need raw levels"));
    }
    let [ti, a, f] = t.shape();
    if ti < 2 {
        return Err(Error::invalid("tensor", "need at least two time points"));
    }
    let vol = t.feature_index("volume");
    let values = Tensor3::from_fn([ti - 1, a, f], |i, j, k| {
        let (p0, p1) = (t.values.get(i, j, k), t.values.get(i + 1, j, k));
        if Some(k) == vol {
            ((p1 + 1.0) / (p0 + 1.0)).ln()
        } else {
            (p1 / p0).ln()
        }
    });
    MarketTensor::new(
        values,
        t.time_labels[1..].to_vec(),
        t.asset_labels.clone(),
        t.feature_labels.clone(),
        Normalization::Returns,
    )
}

/// Z-score each `(asset, feature)` series over time.
pub fn per_asset_zscore(t: &MarketTensor) -> Result<MarketTensor> {
    let [ti, a, f] = t.shape();
    let mut out = t.values.clone();
    for j in 0..a {
        for k in 0..f {
            let s: Vec<f64> = (0..ti).map(|i| t.values.get(i, j, k)).collect();
            let mean = s.iter().sum::<f64>() / ti as f64;
            let sd = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ti as f64).sqrt();
            for (i, x) in s.iter().enumerate() {
                // flat series carry no information; keep them at zero
                out.set(i, j, k, if sd > 0.0 { (x - mean) / sd } else { 0.0 });
            }
        }
    }
    Ok(t.with_values(out, Normalization::PerAssetZ))
}

/// Derive the decomposition input from raw levels under `norm`. Returns are
/// z-scored per feature slice after differencing.
pub fn prepare(raw: &MarketTensor, norm: Normalization) -> Result<MarketTensor> {
    if raw.normalization != Normalization::Raw {
        return Err(Error::invalid("tensor", "expected raw levels"));
    }
    match norm {
        Normalization::Raw => Ok(raw.clone()),
        Normalization::FeatureZ => znormalize_feature_slices(raw),
        Normalization::Returns => {
            let r = log_returns(raw)?;
            let values = znormalize_slices(&r.values, &r.feature_labels)?;
            Ok(r.with_values(values, Normalization::Returns))
        }
        Normalization::PerAssetZ => per_asset_zscore(raw),
    }
}

/// Planted low-rank tensor plus Gaussian noise.
///
/// Factor entries are standard normal, columns unit-normalized; weights are
/// scaled so the noiseless signal has unit RMS, which makes `noise_sd` a
/// noise-to-signal ratio.
pub fn synth_tensor(
    shape: [usize; 3],
    rank: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(MarketTensor, CpModel)> {
    if rank == 0 {
        return Err(Error::invalid("rank", "must be at least 1"));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::invalid("noise_sd", "must be non-negative"));
    }
    let mut factors = Vec::with_capacity(3);
    for (m, &dim) in shape.iter().enumerate() {
        let mut r = rng::substream(seed, &[0xFAC7, m as u64]);
        let mut f = DMatrix::from_fn(dim, rank, |_, _| r.sample::<f64, _>(StandardNormal));
        crate::linalg::normalize_columns(&mut f);
        factors.push(f);
    }
    let c = factors.pop().unwrap();
    let b = factors.pop().unwrap();
    let a = factors.pop().unwrap();
    let base: Vec<f64> = (0..rank).map(|r| 1.0 - 0.5 * r as f64 / rank as f64).collect();
    let mut planted = CpModel::from_factors(a, b, c, base, seed);
    let signal = planted.reconstruct();
    let rms = (signal.frobenius_sq() / signal.as_slice().len() as f64).sqrt();
    if rms > 0.0 {
        planted.scale_weights(1.0 / rms);
    }
    let signal = planted.reconstruct();
    let mut noise = rng::substream(seed, &[0x0015E]);
    let data = signal
        .as_slice()
        .iter()
        .map(|x| x + noise_sd * noise.sample::<f64, _>(StandardNormal))
        .collect();
    let values = Tensor3::from_vec(shape, data)?;
    let start = DateTime::parse_from_rfc3339("2023-01-01T00:00:00Z")
        .unwrap()
        .with_timezone(&Utc);
    let features = if shape[2] == FEATURES.len() {
        FEATURES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..shape[2]).map(|k| format!("f{k}")).collect()
    };
    let tensor = MarketTensor::new(
        values,
        HourlyGrid::new(start, shape[0])?.labels(),
        (0..shape[1]).map(|j| format!("A{j:03}")).collect(),
        features,
        Normalization::Raw,
    )?;
    let ev = crate::decompose::explained_variance(tensor.values(), &signal)?;
    planted.explained_variance = ev;
    Ok((tensor, planted))
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    time_labels: Vec<DateTime<Utc>>,
    asset_labels: Vec<String>,
    feature_labels: Vec<String>,
    normalization: Normalization,
}

/// Write `dir/values` (three little-endian u64 dims, then f64 entries
/// row-major) and `dir/labels.json`.
pub fn save_tensor(t: &MarketTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("values");
    let mut buf = Vec::with_capacity(24 + 8 * t.values.data.len());
    for d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in &t.values.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&path, e))?;
    let labels = LabelsFile {
        time_labels: t.time_labels.clone(),
        asset_labels: t.asset_labels.clone(),
        feature_labels: t.feature_labels.clone(),
        normalization: t.normalization,
    };
    let lpath = dir.join("labels.json");
    fs::write(&lpath, serde_json::to_vec_pretty(&labels)?).map_err(|e| Error::io(&lpath, e))?;
    Ok(())
}

pub fn load_tensor(dir: impl AsRef<Path>) -> Result<MarketTensor> {
    let dir = dir.as_ref();
    let path = dir.join("values");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() < 24 || (bytes.len() - 24) % 8 != 0 {
        return Err(Error::Shape(format!("{}: truncated", path.display())));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    let shape = [word(0) as usize, word(1) as usize, word(2) as usize];
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Tensor3::from_vec(shape, data)?;
    let lpath = dir.join("labels.json");
    let text = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let labels: LabelsFile = serde_json::from_slice(&text)?;
    MarketTensor::new(
        values,
        labels.time_labels,
        labels.asset_labels,
        labels.feature_labels,
        labels.normalization,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(h: i64) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z")
            .unwrap()
            .with_timezone(&Utc)
            + Duration::hours(h)
    }

    fn bar(h: i64, asset: &str, close: f64, volume: f64) -> OhlcvRecord {
        OhlcvRecord {
            timestamp: ts(h),
            asset: asset.into(),
            open: close,
            high: close + 1.0,
            low: close - 1.0,
            close,
            volume,
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn full_records_give_raw_shape() {
        let recs: Vec<_> = (0..3)
            .flat_map(|h| [bar(h, "BTC", 100.0 + h as f64, 5.0), bar(h, "ETH", 10.0, 2.0)])
            .collect();
        let grid = HourlyGrid::new(ts(0), 3).unwrap();
        let t = build_tensor(&recs, &names(&["BTC", "ETH"]), &grid, &Default::default()).unwrap();
        assert_eq!(t.shape(), [3, 2, 5]);
        assert_eq!(t.normalization(), Normalization::Raw);
        assert_eq!(t.feature_labels(), &names(&FEATURES));
    }

    #[test]
    fn single_gap_is_forward_filled() {
        let recs = vec![bar(0, "X", 10.0, 3.0), bar(2, "X", 12.0, 4.0)];
        let grid = HourlyGrid::new(ts(0), 3).unwrap();
        let opts = BuildOptions {
            max_gap: 2,
            min_coverage: 0.5,
        };
        let t = build_tensor(&recs, &names(&["X"]), &grid, &opts).unwrap();
        assert_eq!(t.values().get(1, 0, CLOSE), 10.0);
        assert_eq!(t.values().get(1, 0, VOLUME), 0.0);
        assert_eq!(t.values().get(2, 0, CLOSE), 12.0);
    }

    #[test]
    fn low_coverage_asset_is_reported() {
        let mut recs: Vec<_> = (0..10).map(|h| bar(h, "OK", 5.0, 1.0)).collect();
        recs.extend((0..5).map(|h| bar(2 * h, "HALF", 5.0, 1.0)));
        let grid = HourlyGrid::new(ts(0), 10).unwrap();
        let err = build_tensor(&recs, &names(&["OK", "HALF"]), &grid, &Default::default())
            .unwrap_err();
        match err {
            Error::Coverage(list) => {
                assert_eq!(list.len(), 1);
                assert_eq!(list[0].asset, "HALF");
                assert!((list[0].coverage - 0.5).abs() < 1e-12);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn long_gap_fails_asset() {
        let recs: Vec<_> = (0..20)
            .filter(|h| !(5..10).contains(h))
            .map(|h| bar(h, "X", 5.0, 1.0))
            .collect();
        let grid = HourlyGrid::new(ts(0), 20).unwrap();
        let opts = BuildOptions {
            max_gap: 3,
            min_coverage: 0.5,
        };
        assert!(matches!(
            build_tensor(&recs, &names(&["X"]), &grid, &opts),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn bad_record_reports_row() {
        let mut recs = vec![bar(0, "X", 5.0, 1.0), bar(1, "X", 5.0, 1.0)];
        recs[1].high = 1.0;
        let grid = HourlyGrid::new(ts(0), 2).unwrap();
        match build_tensor(&recs, &names(&["X"]), &grid, &Default::default()) {
            Err(Error::Record { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_parse_errors_carry_row() {
        let text = "timestamp,asset,open,high,low,close,volume\n\
                    2024-01-01T00:00:00Z,X,1,2,0.5,1.5,10\n\
                    2024-01-01T01:00:00Z,X,1,abc,0.5,1.5,10\n";
        match parse_ohlcv(text.as_bytes()) {
            Err(Error::Record { row, reason }) => {
                assert_eq!(row, 2);
                assert!(reason.contains("high"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_volume_is_zero_variance() {
        let recs: Vec<_> = (0..4)
            .flat_map(|h| [bar(h, "A", 2.0 + h as f64, 7.0), bar(h, "B", 3.0, 7.0)])
            .collect();
        let grid = HourlyGrid::new(ts(0), 4).unwrap();
        let t = build_tensor(&recs, &names(&["A", "B"]), &grid, &Default::default()).unwrap();
        match znormalize_feature_slices(&t) {
            Err(Error::ZeroVariance(what)) => assert!(what.contains("volume")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hand_zscore_of_four_numbers() {
        // [[1,2],[3,4]]: mean 2.5, population variance 1.25
        let v = Tensor3::from_vec([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = znormalize_slices(&v, &names(&["x"])).unwrap();
        let sd = 1.25f64.sqrt();
        let expect = [-1.5 / sd, -0.5 / sd, 0.5 / sd, 1.5 / sd];
        for (got, want) in z.as_slice().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mode1_of_one_to_eight() {
        // x[t][a][f] = 1 + 4t + 2a + f; mode-1 columns ordered (f, a) with a fastest
        let t = Tensor3::from_vec([2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let m = matricize(&t, Mode::Time).matrix;
        assert_eq!(m.shape(), (2, 4));
        let row0: Vec<f64> = m.row(0).iter().copied().collect();
        assert_eq!(row0, vec![1.0, 3.0, 2.0, 4.0]);
        let row1: Vec<f64> = m.row(1).iter().copied().collect();
        assert_eq!(row1, vec![5.0, 7.0, 6.0, 8.0]);
    }

    #[test]
    fn mode_shapes() {
        let t = Tensor3::zeros([4, 3, 2]);
        assert_eq!(matricize(&t, Mode::Asset).matrix.shape(), (3, 8));
        assert_eq!(matricize(&t, Mode::Feature).matrix.shape(), (2, 12));
        assert!(Mode::from_index(4).is_err());
    }

    #[test]
    fn khatri_rao_hand_case() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let b = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        let k = khatri_rao(&a, &b).unwrap();
        assert_eq!(k.as_slice(), &[3.0, 4.0, 6.0, 8.0]);
        let a3 = DMatrix::<f64>::zeros(2, 3);
        let b3 = DMatrix::<f64>::zeros(4, 3);
        assert_eq!(khatri_rao(&a3, &b3).unwrap().shape(), (8, 3));
        assert!(khatri_rao(&a3, &DMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn khatri_rao_with_ones_stacks_b() {
        let ones = DMatrix::from_element(3, 2, 1.0);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let k = khatri_rao(&ones, &b).unwrap();
        for blk in 0..3 {
            assert_eq!(k.rows(2 * blk, 2), b.rows(0, 2));
        }
    }

    #[test]
    fn synth_noiseless_rank_one_is_exact() {
        let (t, model) = synth_tensor([6, 5, 4], 1, 0.0, 3).unwrap();
        let recon = model.reconstruct();
        let diff: f64 = t
            .values()
            .as_slice()
            .iter()
            .zip(recon.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn synth_is_deterministic() {
        let (a, _) = synth_tensor([5, 4, 3], 2, 0.1, 11).unwrap();
        let (b, _) = synth_tensor([5, 4, 3], 2, 0.1, 11).unwrap();
        assert_eq!(a, b);
        let (c, _) = synth_tensor([5, 4, 3], 2, 0.1, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn save_load_roundtrip() {
        let (t, _) = synth_tensor([4, 3, 5], 2, 0.1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_tensor(&t, dir.path()).unwrap();
        assert_eq!(load_tensor(dir.path()).unwrap(), t);
    }

    #[test]
    fn mode_product_with_identity_is_noop() {
        let (t, _) = synth_tensor([4, 3, 2], 1, 0.0, 5).unwrap();
        for m in Mode::ALL {
            let id = DMatrix::identity(t.shape()[m.index() - 1], t.shape()[m.index() - 1]);
            assert_eq!(&t.values().mode_product(&id, m).unwrap(), t.values());
        }
    }
}
