//! End-to-end study: configuration, orchestration and the report bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{align, AltMetric, DimMode, Metric};
use crate::claims::{
    aggregate_claims, agreement_stats, aligned_labels, fleiss_kappa, method_correlations, read_chunk_scores,
    split_by_method, Agreement, AggregateOptions, Category, ChunkScores, ClaimsMatrix, MethodCorrelations, Taxonomy,
};
use crate::decompose::{select_rank, tucker, CpModel, CpOptions, TuckerOptions};
use crate::error::{Error, Result};
use crate::inference::{
    bonferroni, disattenuate, factor_loading_decomposition, feature_ablation, leave_one_out, pair_report,
    permutation_test, rolling_alignment, scaling_sensitivity, seed_stability, split_sample, subsample_stability,
    AblationReport, Bonferroni, Disattenuated, LoadingTable, LooReport, PairReport, PermutationOptions,
    RollingOptions, RollingReport, ScalingReport, SplitOptions, SplitSampleReport, StabilitySummary,
    SubsampleReport, WindowSpec,
};
use crate::stats::{raw_stats_matrix, residualize, ReturnKind, StatsMatrix, StatsOptions, DEFAULT_VOL_WINDOW};
use crate::tensor::{build_tensor, prepare, read_ohlcv_csv, BuildOptions, HourlyGrid, MarketTensor, Normalization};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub taxonomy: Option<Vec<Category>>,
    #[serde(default)]
    pub tensor: TensorConfig,
    #[serde(default)]
    pub decomposition: DecompositionConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

fn default_seed() -> u64 {
    crate::rng::DEFAULT_SEED
}

fn default_out() -> PathBuf {
    PathBuf::from("report")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub ohlcv: PathBuf,
    /// One or more chunk-score files; the claims matrix aggregates
    /// `primary_method`.
    #[serde(default)]
    pub chunk_scores: Vec<PathBuf>,
    /// A ready-made claims matrix, used instead of chunk scores.
    #[serde(default)]
    pub claims: Option<PathBuf>,
    #[serde(default)]
    pub primary_method: Option<String>,
    #[serde(default = "default_min_chunks")]
    pub min_chunks: usize,
}

fn default_min_chunks() -> usize {
    crate::claims::DEFAULT_MIN_CHUNKS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TensorConfig {
    pub normalization: Normalization,
    pub max_gap: usize,
    pub min_coverage: f64,
}

impl Default for TensorConfig {
    fn default() -> Self {
        let b = BuildOptions::default();
        Self {
            normalization: Normalization::FeatureZ,
            max_gap: b.max_gap,
            min_coverage: b.min_coverage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cp,
    Tucker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompositionConfig {
    pub method: Method,
    /// Fixed CP rank; when absent the smallest rank reaching `target_ev` is used.
    pub rank: Option<usize>,
    pub target_ev: f64,
    pub max_rank: usize,
    pub tucker_ranks: Option<[usize; 3]>,
    pub max_iter: usize,
    pub tol: f64,
    /// Seeds for the seed-stability check.
    pub stability_seeds: usize,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        let cp = CpOptions::default();
        Self {
            method: Method::Cp,
            rank: None,
            target_ev: 0.9,
            max_rank: 5,
            tucker_ranks: None,
            max_iter: cp.max_iter,
            tol: cp.tol,
            stability_seeds: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsVariant {
    Normalized,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub vol_window: usize,
    pub returns: ReturnKind,
    pub variant: StatsVariant,
    /// Residualize every matrix on average volume before alignment.
    pub residualize_on_volume: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            vol_window: DEFAULT_VOL_WINDOW,
            returns: ReturnKind::Simple,
            variant: StatsVariant::Normalized,
            residualize_on_volume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub dim_mode: DimMode,
    pub metrics: Vec<AltMetric>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            dim_mode: DimMode::Pad,
            metrics: vec![AltMetric::Rv, AltMetric::DCor, AltMetric::Cca, AltMetric::Pls],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub permutations: usize,
    pub bootstrap: usize,
    pub window: WindowSpec,
    pub refit_factors: bool,
    pub ablation: bool,
    pub leave_one_out: bool,
    pub split_sample: bool,
    pub scaling: bool,
    pub subsample_iterations: usize,
    pub subsample_fraction: f64,
    /// Reliabilities `(claims, market)` for the attenuation correction.
    pub reliabilities: Option<(f64, f64)>,
    pub alpha: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            permutations: crate::inference::DEFAULT_PERMUTATIONS,
            bootstrap: crate::inference::DEFAULT_RESAMPLES,
            window: WindowSpec::default(),
            refit_factors: false,
            ablation: true,
            leave_one_out: true,
            split_sample: true,
            scaling: true,
            subsample_iterations: 100,
            subsample_fraction: 0.8,
            reliabilities: None,
            alpha: 0.05,
        }
    }
}

impl StudyConfig {
    /// Resolve relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.ohlcv);
        self.data.chunk_scores.iter_mut().for_each(fix);
        if let Some(c) = self.data.claims.as_mut() {
            fix(c);
        }
        fix(&mut self.output_dir);
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        match &self.taxonomy {
            Some(c) => Taxonomy::new(c.clone()),
            None => Ok(Taxonomy::default()),
        }
    }

    fn cp_options(&self, rank: usize) -> CpOptions {
        CpOptions {
            rank,
            seed: self.seed,
            max_iter: self.decomposition.max_iter,
            tol: self.decomposition.tol,
        }
    }

    fn permutation(&self) -> PermutationOptions {
        PermutationOptions {
            permutations: self.inference.permutations,
            seed: self.seed,
            smoothed: false,
        }
    }

    fn stats_options(&self) -> StatsOptions {
        StatsOptions {
            returns: self.stats.returns,
            vol_window: self.stats.vol_window,
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !self.data.ohlcv.is_file() {
            errs.push(format!("data.ohlcv: file not found: {}", self.data.ohlcv.display()));
        }
        match (&self.data.claims, self.data.chunk_scores.is_empty()) {
            (Some(_), false) => errs.push("data: give either `claims` or `chunk_scores`, not both".into()),
            (None, true) => errs.push("data: one of `claims` or `chunk_scores` is required".into()),
            _ => {}
        }
        for p in self.data.chunk_scores.iter().chain(&self.data.claims) {
            if !p.is_file() {
                errs.push(format!("data: file not found: {}", p.display()));
            }
        }
        if let Err(e) = self.taxonomy() {
            errs.push(format!("taxonomy: {e}"));
        }
        let d = &self.decomposition;
        if d.rank == Some(0) {
            errs.push("decomposition.rank: must be at least 1".into());
        }
        if !(d.target_ev > 0.0 && d.target_ev < 1.0) {
            errs.push("decomposition.target_ev: must lie in (0, 1)".into());
        }
        if d.max_rank == 0 {
            errs.push("decomposition.max_rank: must be at least 1".into());
        }
        if d.max_iter == 0 {
            errs.push("decomposition.max_iter: must be at least 1".into());
        }
        if !(d.tol > 0.0) {
            errs.push("decomposition.tol: must be positive".into());
        }
        if d.method == Method::Tucker && d.tucker_ranks.is_none() {
            errs.push("decomposition.tucker_ranks: required when method = \"tucker\"".into());
        }
        if d.tucker_ranks.is_some_and(|r| r.contains(&0)) {
            errs.push("decomposition.tucker_ranks: every rank must be at least 1".into());
        }
        if d.stability_seeds == 1 {
            errs.push("decomposition.stability_seeds: use 0 (off) or at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.tensor.min_coverage) {
            errs.push("tensor.min_coverage: must lie in [0, 1]".into());
        }
        if self.stats.vol_window < 2 {
            errs.push("stats.vol_window: must be at least 2".into());
        }
        let i = &self.inference;
        if i.permutations < 100 {
            errs.push("inference.permutations: must be at least 100".into());
        }
        if i.bootstrap != 0 && i.bootstrap < 200 {
            errs.push("inference.bootstrap: use 0 (off) or at least 200".into());
        }
        if i.window.length == 0 || i.window.stride == 0 {
            errs.push("inference.window: length and stride must be positive".into());
        }
        if !(i.subsample_fraction > 0.0 && i.subsample_fraction <= 1.0) {
            errs.push("inference.subsample_fraction: must lie in (0, 1]".into());
        }
        if i.subsample_iterations == 1 {
            errs.push("inference.subsample_iterations: use 0 (off) or at least 2".into());
        }
        if let Some((x, y)) = i.reliabilities {
            if !(x > 0.0 && x <= 1.0 && y > 0.0 && y <= 1.0) {
                errs.push("inference.reliabilities: both must lie in (0, 1]".into());
            }
        }
        if !(i.alpha > 0.0 && i.alpha < 1.0) {
            errs.push("inference.alpha: must lie in (0, 1)".into());
        }
        errs
    }
}

/// Parse a TOML config and check it, reporting every problem at once.
/// Relative paths are resolved against the config file's directory.
pub fn validate_config(path: impl AsRef<Path>) -> Result<StudyConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: StudyConfig = toml::from_str(&text).map_err(|e| Error::Config(vec![e.to_string()]))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub data_start: String,
    pub data_end: String,
    pub entities: Vec<String>,
    /// Market assets without claims, and claims entities without market data.
    pub excluded_market: Vec<String>,
    pub excluded_claims: Vec<String>,
    pub low_data_entities: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub rank: usize,
    pub explained_variance: f64,
    /// Claims–factors mean |φ| at this rank.
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AltRow {
    pub pair: String,
    pub metric: String,
    pub value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimRow {
    pub pair: String,
    pub dimension: usize,
    pub phi: f64,
    pub padding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuckerComparison {
    pub ranks: [usize; 3],
    pub explained_variance: f64,
    pub claims_factors_phi: f64,
    /// Congruence of Tucker and CP asset factors.
    pub cp_congruence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementSummary {
    pub methods: Vec<String>,
    /// Primary method against each other method.
    pub pairwise: Vec<(String, Agreement)>,
    pub fleiss_kappa: Option<f64>,
    pub correlations: Option<MethodCorrelations>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledRows {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl LabeledRows {
    fn new(rows: &[String], columns: Vec<String>, m: &DMatrix<f64>) -> Self {
        Self {
            rows: rows.to_vec(),
            columns,
            values: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect(),
        }
    }
}

/// Everything the study computed, in machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n_entities: usize,
    pub rank: usize,
    pub method: Method,
    pub explained_variance: f64,
    pub target_reached: bool,
    pub rank_curve: Vec<RankRow>,
    pub alignment: Vec<PairReport>,
    pub matched_dimension: Vec<PairReport>,
    pub alternative_metrics: Vec<AltRow>,
    pub per_dimension: Vec<DimRow>,
    pub entity_impact: Option<LooReport>,
    pub ablation: Option<AblationReport>,
    pub rolling: Option<RollingReport>,
    pub split_sample: Option<SplitSampleReport>,
    pub loadings: Vec<LoadingTable>,
    pub scaling: Option<ScalingReport>,
    pub seed_stability: Option<StabilitySummary>,
    pub subsample: Option<SubsampleReport>,
    pub tucker: Option<TuckerComparison>,
    pub residualized: Option<Vec<PairReport>>,
    pub disattenuated: Option<Disattenuated>,
    pub bonferroni: Bonferroni,
    pub agreement: Option<AgreementSummary>,
    pub factors: LabeledRows,
    pub claims: LabeledRows,
    pub statistics: LabeledRows,
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub summary: Summary,
    pub tables: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

struct Claims {
    matrix: ClaimsMatrix,
    agreement: Option<AgreementSummary>,
}

fn load_claims(cfg: &StudyConfig, taxonomy: &Taxonomy) -> Result<Claims> {
    if let Some(path) = &cfg.data.claims {
        let matrix = ClaimsMatrix::read_csv(path)?;
        if matrix.taxonomy.names() != taxonomy.names() {
            return Err(Error::Config(vec![format!(
                "claims columns {:?} do not match the taxonomy",
                matrix.taxonomy.names()
            )]));
        }
        return Ok(Claims {
            matrix,
            agreement: None,
        });
    }
    let mut all: Vec<ChunkScores> = Vec::new();
    for p in &cfg.data.chunk_scores {
        all.extend(read_chunk_scores(p, taxonomy)?);
    }
    let first_method = all.first().map(|c| c.method.clone());
    let by_method = split_by_method(all);
    let primary = cfg
        .data
        .primary_method
        .clone()
        .or(first_method)
        .ok_or_else(|| Error::invalid("chunk_scores", "no chunks"))?;
    let primary_chunks = by_method
        .get(&primary)
        .ok_or_else(|| Error::invalid("primary_method", format!("no chunks for method `{primary}`")))?;
    let opts = AggregateOptions {
        min_chunks: cfg.data.min_chunks,
        entities: None,
    };
    let matrix = aggregate_claims(primary_chunks, taxonomy, &opts)?;
    let agreement = if by_method.len() >= 2 {
        Some(agreement_summary(&primary, &by_method, taxonomy, &opts)?)
    } else {
        None
    };
    Ok(Claims { matrix, agreement })
}

fn agreement_summary(
    primary: &str,
    by_method: &BTreeMap<String, Vec<ChunkScores>>,
    taxonomy: &Taxonomy,
    opts: &AggregateOptions,
) -> Result<AgreementSummary> {
    let methods: Vec<String> = by_method.keys().cloned().collect();
    let mut pairwise = Vec::new();
    for m in &methods {
        if m != primary {
            pairwise.push((m.clone(), agreement_stats(&by_method[primary], &by_method[m])?));
        }
    }
    let sets: Vec<&[ChunkScores]> = methods.iter().map(|m| by_method[m].as_slice()).collect();
    let fleiss = fleiss_kappa(&aligned_labels(&sets)?, taxonomy.len()).ok();
    let mats = methods
        .iter()
        .map(|m| aggregate_claims(&by_method[m], taxonomy, opts).map(|c| (m.clone(), c)))
        .collect::<Result<Vec<_>>>()?;
    let common: Vec<String> = mats
        .iter()
        .map(|(_, c)| c.entity_labels.iter().cloned().collect::<BTreeSet<_>>())
        .reduce(|a, b| a.intersection(&b).cloned().collect())
        .unwrap_or_default()
        .into_iter()
        .collect();
    let mats = mats
        .into_iter()
        .map(|(n, c)| c.select(&common).map(|c| (n, c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AgreementSummary {
        methods,
        pairwise,
        fleiss_kappa: fleiss,
        correlations: method_correlations(&mats).ok(),
    })
}

struct Market {
    raw: MarketTensor,
    grid_start: String,
    grid_end: String,
}

fn load_market(cfg: &StudyConfig) -> Result<Market> {
    let records = read_ohlcv_csv(&cfg.data.ohlcv)?;
    let assets: Vec<String> = records
        .iter()
        .map(|r| r.asset.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let grid = HourlyGrid::spanning(&records)?;
    let opts = BuildOptions {
        max_gap: cfg.tensor.max_gap,
        min_coverage: cfg.tensor.min_coverage,
    };
    let raw = build_tensor(&records, &assets, &grid, &opts)?;
    let fmt = |t: chrono::DateTime<chrono::Utc>| t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    Ok(Market {
        grid_start: fmt(grid.at(0)),
        grid_end: fmt(grid.at(grid.len - 1)),
        raw,
    })
}

fn row_index(labels: &[String], wanted: &[String]) -> Vec<usize> {
    wanted
        .iter()
        .map(|w| labels.iter().position(|l| l == w).expect("entity present"))
        .collect()
}

struct Fit {
    model: CpModel,
    models: Vec<CpModel>,
    target_reached: bool,
}

fn fit_cp(x: &MarketTensor, cfg: &StudyConfig) -> Result<Fit> {
    let d = &cfg.decomposition;
    let base = cfg.cp_options(1);
    let sel = select_rank(x.values(), d.target_ev, d.max_rank.max(d.rank.unwrap_or(1)), &base)?;
    let (model, reached) = match d.rank {
        Some(r) => (sel.models[r - 1].clone(), true),
        None => (sel.selected().clone(), sel.target_reached),
    };
    Ok(Fit {
        model,
        models: sel.models,
        target_reached: reached,
    })
}

/// Run every stage of the study and write the report bundle to
/// `cfg.output_dir`.
pub fn run_study(cfg: &StudyConfig) -> Result<ReportBundle> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let taxonomy = cfg.taxonomy()?;
    let categories = taxonomy.names();

    // 1. ingest
    let market = load_market(cfg).map_err(|e| e.in_stage("ingest"))?;
    let claims = load_claims(cfg, &taxonomy).map_err(|e| e.in_stage("ingest"))?;
    let market_assets: BTreeSet<&String> = market.raw.asset_labels().iter().collect();
    let claim_entities: BTreeSet<&String> = claims.matrix.entity_labels.iter().collect();
    let common: Vec<String> = market_assets.intersection(&claim_entities).map(|s| s.to_string()).collect();
    if common.is_empty() {
        return Err(Error::EmptyIntersection.in_stage("ingest"));
    }
    let excluded_market: Vec<String> = market_assets.difference(&claim_entities).map(|s| s.to_string()).collect();
    let excluded_claims: Vec<String> = claim_entities.difference(&market_assets).map(|s| s.to_string()).collect();

    // 2. decomposition on the full asset set
    let x = prepare(&market.raw, cfg.tensor.normalization).map_err(|e| e.in_stage("decompose"))?;
    let fit = fit_cp(&x, cfg).map_err(|e| e.in_stage("decompose"))?;
    let asset_idx = row_index(market.raw.asset_labels(), &common);
    let tucker_cmp = match cfg.decomposition.tucker_ranks {
        Some(ranks) => Some(tucker(x.values(), ranks, &TuckerOptions::default()).map_err(|e| e.in_stage("decompose"))?),
        None => None,
    };
    let (factors_all, rank, ev) = match (cfg.decomposition.method, &tucker_cmp) {
        (Method::Tucker, Some(t)) => (t.asset_factors.clone(), t.ranks[1], t.explained_variance),
        _ => (fit.model.weighted_asset_factors(), fit.model.rank, fit.model.explained_variance),
    };
    let mut f = crate::linalg::select_rows(&factors_all, &asset_idx);

    // 3. statistics and claims on common entities
    let stats_all = raw_stats_matrix(&market.raw, &cfg.stats_options()).map_err(|e| e.in_stage("statistics"))?;
    let stats_used: StatsMatrix = match cfg.stats.variant {
        StatsVariant::Normalized => stats_all.normalize().map_err(|e| e.in_stage("statistics"))?,
        StatsVariant::Raw => stats_all.clone(),
    };
    let mut s = crate::linalg::select_rows(&stats_used.values, &asset_idx);
    let claims_common = claims.matrix.select(&common).map_err(|e| e.in_stage("claims"))?;
    let mut c = claims_common.values.clone();

    // 4. alignment
    let mode = cfg.alignment.dim_mode;
    let perm = cfg.permutation();
    let boot = (cfg.inference.bootstrap > 0).then_some(cfg.inference.bootstrap);
    let align_stage = |e: Error| e.in_stage("alignment");
    let pairs = |c: &DMatrix<f64>, s: &DMatrix<f64>, f: &DMatrix<f64>, mode: DimMode, boot: Option<usize>| {
        Ok::<_, Error>(vec![
            pair_report("claims_statistics", c, s, mode, &perm, boot)?,
            pair_report("claims_factors", c, f, mode, &perm, boot)?,
            pair_report("statistics_factors", s, f, mode, &perm, boot)?,
        ])
    };
    let alignment = pairs(&c, &s, &f, mode, boot).map_err(align_stage)?;
    let other_mode = match mode {
        DimMode::Pad => DimMode::Reduce,
        DimMode::Reduce => DimMode::Pad,
    };
    let matched_dimension = match pairs(&c, &s, &f, other_mode, None) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("matched-dimension alignment skipped: {e}");
            Vec::new()
        }
    };
    let mut alternative_metrics = Vec::new();
    for (name, a, b) in [("claims_statistics", &c, &s), ("claims_factors", &c, &f), ("statistics_factors", &s, &f)] {
        for m in &cfg.alignment.metrics {
            let metric = Metric::Alt(*m);
            let rep = permutation_test(a, b, &metric, &perm).map_err(align_stage)?;
            alternative_metrics.push(AltRow {
                pair: name.into(),
                metric: metric.name().into(),
                value: rep.observed,
                p_value: rep.p_value,
            });
        }
    }
    let per_dimension = alignment
        .iter()
        .flat_map(|p| {
            let live = p.per_dim_phi.len() - p.padded_dims;
            p.per_dim_phi.iter().enumerate().map(move |(k, &phi)| DimRow {
                pair: p.pair.clone(),
                dimension: k + 1,
                phi,
                padding: k >= live,
            })
        })
        .collect();
    let rank_curve = fit
        .models
        .iter()
        .map(|m| {
            let fm = crate::linalg::select_rows(&m.weighted_asset_factors(), &asset_idx);
            Ok(RankRow {
                rank: m.rank,
                explained_variance: m.explained_variance,
                phi: align(&c, &fm, mode)?.mean_abs_phi,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(align_stage)?;
    let tucker = match &tucker_cmp {
        Some(t) => {
            let tf = crate::linalg::select_rows(&t.asset_factors, &asset_idx);
            Some(TuckerComparison {
                ranks: t.ranks,
                explained_variance: t.explained_variance,
                claims_factors_phi: align(&c, &tf, mode).map_err(align_stage)?.mean_abs_phi,
                cp_congruence: crate::decompose::factor_congruence(&fit.model.asset_factors, &t.asset_factors)
                    .map_err(align_stage)?
                    .mean_abs_phi,
            })
        }
        None => None,
    };

    // 5. robustness
    let robust = |e: Error| e.in_stage("robustness");
    let metric = Metric::Phi(mode);
    let entity_impact = if cfg.inference.leave_one_out && common.len() >= 3 {
        Some(leave_one_out(&c, &s, &common, &metric).map_err(robust)?)
    } else {
        None
    };
    let ablation = if cfg.inference.ablation {
        Some(feature_ablation(&c, &categories, &s, &metric).map_err(robust)?)
    } else {
        None
    };
    let stats_opts = cfg.stats_options();
    let rolling = {
        let raw_common = market.raw.select_assets(&common).map_err(robust)?;
        let refit = cfg.inference.refit_factors.then(|| cfg.cp_options(rank));
        let opts = RollingOptions {
            window: cfg.inference.window,
            stats: stats_opts,
            dim_mode: mode,
            refit,
            normalization: cfg.tensor.normalization,
        };
        match rolling_alignment(&raw_common, &c, &opts) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("rolling windows skipped: {e}");
                None
            }
        }
    };
    let split = if cfg.inference.split_sample {
        let opts = SplitOptions {
            cp: cfg.cp_options(rank),
            stats: stats_opts,
            normalization: cfg.tensor.normalization,
            permutation: perm,
            dim_mode: mode,
        };
        let raw_common = market.raw.select_assets(&common).map_err(robust)?;
        match split_sample(&raw_common, &opts) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("split-sample check skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    let loadings = factor_loading_decomposition(&s, &stats_used.stat_labels, &c, &categories, &f)
        .map_err(robust)?
        .to_vec();
    let scaling = if cfg.inference.scaling {
        match scaling_sensitivity(&market.raw, &cfg.cp_options(rank), Some(&fit.model)) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("scaling sensitivity skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    let seed_stab = if cfg.decomposition.stability_seeds >= 2 {
        let seeds: Vec<u64> = (0..cfg.decomposition.stability_seeds as u64).map(|k| cfg.seed + k).collect();
        Some(seed_stability(x.values(), &cfg.cp_options(rank), &seeds).map_err(robust)?)
    } else {
        None
    };
    let subsample = if cfg.inference.subsample_iterations >= 2 {
        subsample_stability(
            &c,
            &s,
            &metric,
            cfg.inference.subsample_iterations,
            cfg.inference.subsample_fraction,
            cfg.seed,
        )
        .map_err(|e| log::warn!("subsample stability skipped: {e}"))
        .ok()
    } else {
        None
    };
    let residualized = if cfg.stats.residualize_on_volume {
        let vol_col = stats_all.column("avg_volume").expect("avg_volume is a statistic");
        let cov: Vec<f64> = asset_idx.iter().map(|&i| vol_col[i]).collect();
        let r = |m: &DMatrix<f64>| residualize(m, &cov).map(|r| r.matrix);
        c = r(&c).map_err(robust)?;
        s = r(&s).map_err(robust)?;
        f = r(&f).map_err(robust)?;
        Some(pairs(&c, &s, &f, mode, None).map_err(robust)?)
    } else {
        None
    };
    let disattenuated = match cfg.inference.reliabilities {
        Some((rx, ry)) => Some(disattenuate(alignment[1].mean_abs_phi, rx, ry).map_err(robust)?),
        None => None,
    };
    let mut p_values: Vec<f64> = alignment.iter().map(|p| p.p_value).collect();
    p_values.extend(alternative_metrics.iter().map(|r| r.p_value));
    p_values.extend(matched_dimension.iter().map(|p| p.p_value));
    let bonf = bonferroni(&p_values, cfg.inference.alpha).map_err(robust)?;

    let mut notes = vec![
        "p-values are #{null >= observed} / B over row permutations of the second matrix; Procrustes refit per permutation".to_string(),
        "PLS score: first singular value of the standardized cross-covariance over the product of the matrices' largest singular values, clamped to [0, 1]".to_string(),
        "CCA: ridge 1e-6 * trace/dim on both covariance blocks when n < 3 * max(p, q)".to_string(),
        "factor matrix: CP asset factors scaled by component weights".to_string(),
    ];
    if !fit.target_reached {
        notes.push(format!(
            "target EV {} not reached up to rank {}",
            cfg.decomposition.target_ev, cfg.decomposition.max_rank
        ));
    }

    let mut input_hashes = BTreeMap::new();
    for p in std::iter::once(&cfg.data.ohlcv)
        .chain(&cfg.data.chunk_scores)
        .chain(&cfg.data.claims)
    {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        input_hashes.insert(name, sha256_hex(&bytes));
    }
    let mut hashed = cfg.clone();
    hashed.output_dir = PathBuf::new();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        schema_version: SCHEMA_VERSION,
        config_hash: sha256_hex(&serde_json::to_vec(&ConfigDigest::from(&hashed))?),
        input_hashes,
        seed: cfg.seed,
        data_start: market.grid_start.clone(),
        data_end: market.grid_end.clone(),
        entities: common.clone(),
        excluded_market,
        excluded_claims,
        low_data_entities: claims_common.low_data.clone(),
        notes,
    };
    let factor_cols = (1..=f.ncols()).map(|k| format!("factor_{k}")).collect();
    let summary = Summary {
        n_entities: common.len(),
        rank,
        method: cfg.decomposition.method,
        explained_variance: ev,
        target_reached: fit.target_reached,
        rank_curve,
        alignment,
        matched_dimension,
        alternative_metrics,
        per_dimension,
        entity_impact,
        ablation,
        rolling,
        split_sample: split,
        loadings,
        scaling,
        seed_stability: seed_stab,
        subsample,
        tucker,
        residualized,
        disattenuated,
        bonferroni: bonf,
        agreement: claims.agreement,
        factors: LabeledRows::new(&common, factor_cols, &crate::linalg::select_rows(&factors_all, &asset_idx)),
        claims: LabeledRows::new(&common, categories.clone(), &claims_common.values),
        statistics: LabeledRows::new(
            &common,
            stats_used.stat_labels.clone(),
            &crate::linalg::select_rows(&stats_used.values, &asset_idx),
        ),
    };
    write_bundle(&cfg.output_dir, manifest, summary, &stats_all).map_err(|e| e.in_stage("report"))
}

/// Config fields that affect results, with paths reduced to file names so
/// the hash does not depend on where the study is run from.
#[derive(Serialize)]
struct ConfigDigest {
    config: serde_json::Value,
}

impl From<&StudyConfig> for ConfigDigest {
    fn from(cfg: &StudyConfig) -> Self {
        let mut c = cfg.clone();
        let base = |p: &mut PathBuf| {
            if let Some(n) = p.file_name() {
                *p = PathBuf::from(n);
            }
        };
        base(&mut c.data.ohlcv);
        c.data.chunk_scores.iter_mut().for_each(base);
        if let Some(p) = c.data.claims.as_mut() {
            base(p);
        }
        Self {
            config: serde_json::to_value(&c).unwrap_or_default(),
        }
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_bundle(dir: &Path, manifest: Manifest, summary: Summary, stats_all: &StatsMatrix) -> Result<ReportBundle> {
    let tables_dir = dir.join("tables");
    fs::create_dir_all(&tables_dir).map_err(|e| Error::io(&tables_dir, e))?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("summary.json"), &summary)?;
    let mut tables = Vec::new();
    let mut table = |name: &str| {
        let p = tables_dir.join(name);
        tables.push(p.clone());
        p
    };

    write_csv(
        &table("rank_sensitivity.csv"),
        &["rank", "explained_variance", "phi"],
        summary
            .rank_curve
            .iter()
            .map(|r| vec![r.rank.to_string(), r.explained_variance.to_string(), r.phi.to_string()]),
    )?;
    let pair_rows = |v: &[PairReport]| -> Vec<Vec<String>> {
        v.iter()
            .map(|p| {
                vec![
                    p.pair.clone(),
                    p.mean_abs_phi.to_string(),
                    p.p_value.to_string(),
                    opt(p.ci.map(|c| c.0)),
                    opt(p.ci.map(|c| c.1)),
                    p.n_entities.to_string(),
                    p.padded_dims.to_string(),
                ]
            })
            .collect()
    };
    let pair_header = ["comparison", "phi", "p_value", "ci_lo", "ci_hi", "n", "padded_dims"];
    write_csv(&table("alignment.csv"), &pair_header, pair_rows(&summary.alignment))?;
    write_csv(&table("matched_dimension.csv"), &pair_header, pair_rows(&summary.matched_dimension))?;
    if let Some(r) = &summary.residualized {
        write_csv(&table("residualized.csv"), &pair_header, pair_rows(r))?;
    }
    if let Some(r) = &summary.rolling {
        write_csv(
            &table("rolling.csv"),
            &["window", "start", "end", "phi", "claims_factors_phi"],
            r.windows.iter().map(|w| {
                vec![
                    (w.index + 1).to_string(),
                    w.start.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                    w.end.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                    w.claims_stats.to_string(),
                    opt(w.claims_factors),
                ]
            }),
        )?;
    }
    if let Some(l) = &summary.entity_impact {
        write_csv(
            &table("entity_impact.csv"),
            &["entity", "impact", "phi_without"],
            l.impacts
                .iter()
                .map(|e| vec![e.entity.clone(), e.impact.to_string(), e.score_without.to_string()]),
        )?;
    }
    if let Some(a) = &summary.ablation {
        write_csv(
            &table("ablation.csv"),
            &["category", "impact"],
            a.impacts.iter().map(|c| vec![c.category.clone(), c.impact.to_string()]),
        )?;
    }
    write_csv(
        &table("alternative_metrics.csv"),
        &["comparison", "metric", "value", "p_value"],
        summary
            .alternative_metrics
            .iter()
            .map(|r| vec![r.pair.clone(), r.metric.clone(), r.value.to_string(), r.p_value.to_string()]),
    )?;
    write_csv(
        &table("loadings.csv"),
        &["source", "variable", "factor", "r", "p_value", "stars"],
        loading_rows(&summary.loadings),
    )?;
    write_csv(
        &table("per_dimension_phi.csv"),
        &["comparison", "dimension", "phi", "padding"],
        summary
            .per_dimension
            .iter()
            .map(|d| vec![d.pair.clone(), d.dimension.to_string(), d.phi.to_string(), d.padding.to_string()]),
    )?;
    write_csv(&table("robustness.csv"), &["check", "value"], robustness_rows(&summary))?;
    stats_all.write_csv(table("stats_matrix_raw.csv"))?;
    let s = &summary.statistics;
    crate::io::write_labeled_matrix(
        table("stats_matrix.csv"),
        "asset",
        &s.rows,
        &s.columns,
        &rows_to_matrix(&s.values),
    )?;
    let c = &summary.claims;
    crate::io::write_labeled_matrix(
        table("claims_matrix.csv"),
        "entity",
        &c.rows,
        &c.columns,
        &rows_to_matrix(&c.values),
    )?;

    let plots = emit_plot_data(&summary, &dir.join("plots"))?;
    Ok(ReportBundle {
        dir: dir.to_path_buf(),
        manifest,
        summary,
        tables,
        plots,
    })
}

fn robustness_rows(s: &Summary) -> Vec<Vec<String>> {
    let mut rows: Vec<(String, f64)> = Vec::new();
    if let Some(r) = &s.rolling {
        rows.push(("rolling_mean".into(), r.mean));
        rows.push(("rolling_sd".into(), r.sd));
    }
    if let Some(sp) = &s.split_sample {
        for d in [&sp.forward, &sp.reverse] {
            rows.push((format!("{}_phi", d.direction), d.mean_abs_phi));
            rows.push((format!("{}_p", d.direction), d.p_value));
        }
    }
    if let Some(sc) = &s.scaling {
        for p in &sc.pairs {
            rows.push((format!("scaling_{}_{}", p.first, p.second), p.phi));
        }
        rows.push(("scaling_mean_phi".into(), sc.mean_phi));
    }
    if let Some(st) = &s.seed_stability {
        rows.push(("seed_stability_mean".into(), st.mean));
        rows.push(("seed_stability_min".into(), st.min));
    }
    if let Some(sub) = &s.subsample {
        rows.push(("subsample_mean".into(), sub.summary.mean));
        rows.push(("subsample_lo".into(), sub.lo));
        rows.push(("subsample_hi".into(), sub.hi));
    }
    if let Some(t) = &s.tucker {
        rows.push(("tucker_ev".into(), t.explained_variance));
        rows.push(("tucker_claims_factors_phi".into(), t.claims_factors_phi));
        rows.push(("tucker_cp_congruence".into(), t.cp_congruence));
    }
    if let Some(d) = &s.disattenuated {
        rows.push(("disattenuated_phi".into(), d.value));
    }
    rows.push(("bonferroni_alpha".into(), s.bonferroni.alpha_corrected));
    rows.into_iter().map(|(k, v)| vec![k, v.to_string()]).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

fn loading_rows(tables: &[LoadingTable]) -> Vec<Vec<String>> {
    tables
        .iter()
        .flat_map(|t| {
            t.cells.iter().map(move |c| {
                vec![
                    t.source.clone(),
                    c.variable.clone(),
                    c.factor.to_string(),
                    opt(c.r),
                    opt(c.p_value),
                    c.stars.clone(),
                ]
            })
        })
        .collect()
}

/// One tidy CSV per figure: factor scatter, claims heatmap, rank curve,
/// entity impact, ablation and loading heatmaps.
pub fn emit_plot_data(summary: &Summary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    let mut file = |name: &str| {
        let p = dir.join(name);
        out.push(p.clone());
        p
    };
    let f = &summary.factors;
    write_csv(
        &file("factor_scatter.csv"),
        &["entity", "factor", "loading"],
        f.rows.iter().zip(&f.values).flat_map(|(e, row)| {
            row.iter()
                .enumerate()
                .map(move |(k, v)| vec![e.clone(), (k + 1).to_string(), v.to_string()])
        }),
    )?;
    let c = &summary.claims;
    write_csv(
        &file("claims_heatmap.csv"),
        &["entity", "category", "score"],
        c.rows.iter().zip(&c.values).flat_map(|(e, row)| {
            row.iter()
                .zip(&c.columns)
                .map(move |(v, k)| vec![e.clone(), k.clone(), v.to_string()])
        }),
    )?;
    write_csv(
        &file("rank_curve.csv"),
        &["rank", "ev", "phi"],
        summary
            .rank_curve
            .iter()
            .map(|r| vec![r.rank.to_string(), r.explained_variance.to_string(), r.phi.to_string()]),
    )?;
    if let Some(l) = &summary.entity_impact {
        write_csv(
            &file("entity_impact.csv"),
            &["entity", "impact"],
            l.impacts.iter().map(|e| vec![e.entity.clone(), e.impact.to_string()]),
        )?;
    }
    if let Some(a) = &summary.ablation {
        write_csv(
            &file("ablation.csv"),
            &["category", "impact"],
            a.impacts.iter().map(|c| vec![c.category.clone(), c.impact.to_string()]),
        )?;
    }
    write_csv(
        &file("loadings.csv"),
        &["source", "variable", "factor", "r", "p", "stars"],
        loading_rows(&summary.loadings),
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::WindowUnit;

    #[test]
    fn problems_are_collected() {
        let cfg: StudyConfig = toml::from_str(
            r#"
            schema_version = 2
            [data]
            ohlcv = "/nonexistent/market.csv"
            [decomposition]
            rank = 0
            "#,
        )
        .unwrap();
        let p = cfg.problems();
        assert!(p.iter().any(|e| e.contains("schema_version")));
        assert!(p.iter().any(|e| e.contains("data.ohlcv")));
        assert!(p.iter().any(|e| e.contains("decomposition.rank")));
        assert!(p.iter().any(|e| e.contains("one of `claims` or `chunk_scores`")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<StudyConfig, _> = toml::from_str(
            r#"
            schema_version = 1
            bogus = 3
            [data]
            ohlcv = "x.csv"
            "#,
        );
        assert!(r.is_err());
    }

    #[test]
    fn window_unit_parses() {
        let cfg: StudyConfig = toml::from_str(
            r#"
            schema_version = 1
            [data]
            ohlcv = "x.csv"
            claims = "c.csv"
            [inference.window]
            length = 240
            stride = 80
            unit = "hours"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.inference.window.unit, WindowUnit::Hours);
    }
}
