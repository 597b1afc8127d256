//! Synthetic market bars and classifier scores with known structure, used by
//! tests, examples and the bundled study fixture.

use chrono::{DateTime, Duration, Utc};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::claims::{ChunkScores, Taxonomy};
use crate::rng;
use crate::tensor::OhlcvRecord;

#[derive(Debug, Clone)]
pub struct MarketSpec {
    pub assets: usize,
    pub hours: usize,
    pub start: DateTime<Utc>,
    pub seed: u64,
    /// Probability of dropping an isolated hourly bar.
    pub missing_rate: f64,
}

impl MarketSpec {
    pub fn new(assets: usize, hours: usize, seed: u64) -> Self {
        Self {
            assets,
            hours,
            start: DateTime::parse_from_rfc3339("2023-01-01T00:00:00Z")
                .unwrap()
                .with_timezone(&Utc),
            seed,
            missing_rate: 0.0,
        }
    }
}

/// Latent per-asset traits behind the generated bars.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetTraits {
    pub asset: String,
    /// Standardized size trait: drives price level, drift and volatility.
    pub size: f64,
    /// Standardized activity trait: drives traded volume.
    pub activity: f64,
    pub price_level: f64,
    pub drift: f64,
    pub volatility: f64,
    pub volume_level: f64,
}

pub fn asset_name(j: usize) -> String {
    format!("T{j:02}")
}

/// Hourly bars for `spec.assets` assets whose price level, drift, volatility
/// and volume level are functions of two latent traits, so market statistics
/// and tensor factors share asset-mode structure.
pub fn synth_market(spec: &MarketSpec) -> (Vec<OhlcvRecord>, Vec<AssetTraits>) {
    let mut records = Vec::with_capacity(spec.assets * spec.hours);
    let mut traits = Vec::with_capacity(spec.assets);
    for j in 0..spec.assets {
        let mut r = rng::substream(spec.seed, &[0x3A4E7, j as u64]);
        let size: f64 = r.sample(StandardNormal);
        let activity: f64 = r.sample(StandardNormal);
        let t = AssetTraits {
            asset: asset_name(j),
            size,
            activity,
            price_level: (3.0 + 1.5 * size).exp(),
            drift: 4e-5 * size,
            volatility: 0.006 * (0.35 * size).exp(),
            volume_level: (8.0 + 1.2 * activity).exp(),
        };
        let mut close = t.price_level;
        let mut skipped_prev = false;
        for h in 0..spec.hours {
            let ret = t.drift + t.volatility * r.sample::<f64, _>(StandardNormal);
            let open = close;
            close = open * ret.exp();
            let wick = |r: &mut rand_chacha::ChaCha8Rng| {
                (0.5 * t.volatility * r.sample::<f64, _>(StandardNormal).abs()).exp()
            };
            let high = open.max(close) * wick(&mut r);
            let low = open.min(close) / wick(&mut r);
            let volume = t.volume_level * (0.3 * r.sample::<f64, _>(StandardNormal)).exp();
            let interior = h > 0 && h + 1 < spec.hours;
            let drop = interior && !skipped_prev && r.random::<f64>() < spec.missing_rate;
            skipped_prev = drop;
            if drop {
                continue;
            }
            records.push(OhlcvRecord {
                timestamp: spec.start + Duration::hours(h as i64),
                asset: t.asset.clone(),
                open,
                high,
                low,
                close,
                volume,
            });
        }
        traits.push(t);
    }
    (records, traits)
}

fn simplex_point(k: usize, concentration: &[f64], r: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k)
        .map(|i| Gamma::new(concentration[i], 1.0).unwrap().sample(r))
        .collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        v = vec![1.0 / k as f64; k];
    }
    v
}

/// Chunk scores drawn from an entity-specific Dirichlet profile. Entities
/// get random profiles independent of any market data.
pub fn synth_chunk_scores(
    entities: &[String],
    chunks_per_entity: usize,
    taxonomy: &Taxonomy,
    method: &str,
    seed: u64,
) -> Vec<ChunkScores> {
    let k = taxonomy.len();
    let mut out = Vec::with_capacity(entities.len() * chunks_per_entity);
    for (e, entity) in entities.iter().enumerate() {
        let mut pr = rng::substream(seed, &[0xC1A1, e as u64]);
        let profile = simplex_point(k, &vec![1.0; k], &mut pr);
        let conc: Vec<f64> = profile.iter().map(|p| 0.2 + 8.0 * p).collect();
        let tag = method.bytes().fold(0u64, |h, b| rng::mix64(h ^ b as u64));
        let mut r = rng::substream(seed, &[0xC1A2, e as u64, tag]);
        for c in 0..chunks_per_entity {
            out.push(ChunkScores {
                entity: entity.clone(),
                chunk_id: c as u64,
                method: method.into(),
                scores: simplex_point(k, &conc, &mut r),
            });
        }
    }
    out
}

/// Random claims matrix: `n` rows uniformly distributed on the `k`-simplex.
pub fn random_claims(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::substream(seed, &[0xC1A3]);
    let ones = vec![1.0; k];
    let rows: Vec<Vec<f64>> = (0..n).map(|_| simplex_point(k, &ones, &mut r)).collect();
    DMatrix::from_fn(n, k, |i, j| rows[i][j])
}

/// Paths written by [`write_study_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub ohlcv: std::path::PathBuf,
    pub chunk_scores: std::path::PathBuf,
    pub config: std::path::PathBuf,
}

/// Small end-to-end study: six market assets over 400 hours, chunk scores
/// from two methods for five of them plus one entity with no market data,
/// and a config wired to both files.
pub fn write_study_fixture(dir: &std::path::Path, seed: u64) -> crate::Result<FixturePaths> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut spec = MarketSpec::new(6, 400, seed);
    spec.missing_rate = 0.01;
    let (records, _) = synth_market(&spec);
    let ohlcv = dir.join("ohlcv.csv");
    crate::tensor::write_ohlcv_csv(&ohlcv, &records)?;

    let tax = Taxonomy::default();
    let mut entities: Vec<String> = (1..6).map(asset_name).collect();
    entities.push("ZZ".into());
    let mut chunks = synth_chunk_scores(&entities, 12, &tax, "nli", seed);
    chunks.extend(synth_chunk_scores(&entities, 12, &tax, "embed", seed));
    let chunk_scores = dir.join("chunk_scores.csv");
    crate::claims::write_chunk_scores(&chunk_scores, &chunks, &tax)?;

    let config = dir.join("study.toml");
    let text = format!(
        r#"schema_version = 1
seed = {seed}
output_dir = "report"

[data]
ohlcv = "ohlcv.csv"
chunk_scores = ["chunk_scores.csv"]
primary_method = "nli"

[decomposition]
rank = 2
max_rank = 3
tucker_ranks = [2, 2, 2]
stability_seeds = 3

[stats]
vol_window = 48

[inference]
permutations = 200
bootstrap = 200
subsample_iterations = 20
reliabilities = [0.75, 0.8]

[inference.window]
length = 240
stride = 80
unit = "hours"
"#
    );
    std::fs::write(&config, text).map_err(|e| crate::Error::io(&config, e))?;
    Ok(FixturePaths {
        ohlcv,
        chunk_scores,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_satisfy_invariants() {
        let mut spec = MarketSpec::new(3, 50, 7);
        spec.missing_rate = 0.2;
        let (records, traits) = synth_market(&spec);
        assert_eq!(traits.len(), 3);
        assert!(records.len() < 150);
        for r in &records {
            r.validate().unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = MarketSpec::new(2, 20, 9);
        assert_eq!(synth_market(&spec).0, synth_market(&spec).0);
    }

    #[test]
    fn chunk_scores_are_on_simplex() {
        let tax = Taxonomy::default();
        let ents = vec!["A".to_string(), "B".to_string()];
        for c in synth_chunk_scores(&ents, 5, &tax, "nli", 1) {
            c.validate(tax.len()).unwrap();
        }
    }

    #[test]
    fn random_claims_rows_sum_to_one() {
        let m = random_claims(6, 4, 3);
        for i in 0..6 {
            assert!((m.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }
}
