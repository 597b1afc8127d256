use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use tensor_align::align::{align, alt_alignment, AltMetric, DimMode, Metric};
use tensor_align::decompose::{save_cp_model, select_rank, tucker, CpOptions, TuckerOptions};
use tensor_align::inference::{
    bootstrap_ci, factor_loading_decomposition, feature_ablation, leave_one_out, permutation_test,
    power_simulation, rolling_alignment, split_sample, PermutationOptions, PowerOptions, RollingOptions,
    SplitOptions, WindowSpec, WindowUnit,
};
use tensor_align::io::{read_labeled_matrix, LabeledMatrix};
use tensor_align::stats::{raw_stats_matrix, ReturnKind, StatsOptions, DEFAULT_VOL_WINDOW};
use tensor_align::study::{run_study, validate_config};
use tensor_align::tensor::{build_tensor, prepare, read_ohlcv_csv, BuildOptions, HourlyGrid, MarketTensor};
use tensor_align::{Error, Normalization, Result};

#[derive(Parser)]
#[command(name = "tensor-align", version, about = "Market tensor factors and narrative alignment tests")]
struct Cli {
    /// Random seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Reports are printed to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Study config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full study described by --config.
    Run,
    /// Validate --config and report every problem found.
    Validate,
    /// Fit a CP or Tucker model to a market tensor.
    Decompose(DecomposeArgs),
    /// Cross-sectional market statistics per asset.
    Stats(StatsArgs),
    /// Procrustes alignment, or an alternative metric, between two matrices.
    Align(PairArgs),
    /// Permutation test of an alignment metric.
    Permtest(PermArgs),
    /// Percentile bootstrap interval of an alignment metric.
    Bootstrap(BootArgs),
    /// Power of the permutation test on planted pairs.
    Power(PowerArgs),
    /// Leave-one-entity-out impact on alignment.
    Loo(PairArgs),
    /// Drop one claims category at a time.
    Ablate(AblateArgs),
    /// Alignment in rolling time windows.
    Rolling(RollingArgs),
    /// Fit factors on one half of the sample, test against the other.
    SplitSample(SplitArgs),
    /// Correlate statistics and claims with factor loadings.
    DecomposeLoadings(LoadingsArgs),
    /// Write a small synthetic study (market bars, chunk scores, config).
    Synth,
}

#[derive(Args)]
struct TensorArgs {
    /// Hourly OHLCV CSV.
    #[arg(long)]
    ohlcv: PathBuf,
    /// raw | feature_z | returns | per_asset_z
    #[arg(long, default_value = "feature_z")]
    normalization: String,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    tensor: TensorArgs,
    /// cp | tucker
    #[arg(long, default_value = "cp")]
    method: String,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    target_ev: f64,
    #[arg(long, default_value_t = 5)]
    max_rank: usize,
    /// Tucker ranks as `time,asset,feature`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    tucker_ranks: Option<Vec<usize>>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    ohlcv: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VOL_WINDOW)]
    vol_window: usize,
    /// Use log returns instead of simple returns.
    #[arg(long)]
    log_returns: bool,
}

#[derive(Args)]
struct PairArgs {
    /// First matrix (CSV, label column then values).
    #[arg(long)]
    a: PathBuf,
    /// Second matrix; rows are matched to the first by label.
    #[arg(long)]
    b: PathBuf,
    /// pad | reduce
    #[arg(long, default_value = "pad")]
    dim_mode: String,
    /// phi | rv | dcor | cca | pls
    #[arg(long, default_value = "phi")]
    metric: String,
}

#[derive(Args)]
struct PermArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = tensor_align::inference::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    /// Report the (count + 1) / (B + 1) p-value as well.
    #[arg(long)]
    smoothed: bool,
}

#[derive(Args)]
struct BootArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = tensor_align::inference::DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct PowerArgs {
    #[arg(long, default_value_t = 37)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.5, 0.65, 0.7])]
    effects: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 200)]
    permutations: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    claims: PathBuf,
    /// Matrix the claims are aligned with.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "pad")]
    dim_mode: String,
}

#[derive(Args)]
struct RollingArgs {
    #[command(flatten)]
    tensor: TensorArgs,
    #[arg(long)]
    claims: PathBuf,
    #[arg(long, default_value_t = 6)]
    length: usize,
    #[arg(long, default_value_t = 3)]
    stride: usize,
    /// months | hours
    #[arg(long, default_value = "months")]
    unit: String,
    /// Refit CP factors inside every window.
    #[arg(long)]
    refit_factors: bool,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = DEFAULT_VOL_WINDOW)]
    vol_window: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    tensor: TensorArgs,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = tensor_align::inference::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = DEFAULT_VOL_WINDOW)]
    vol_window: usize,
}

#[derive(Args)]
struct LoadingsArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    claims: PathBuf,
    #[arg(long)]
    factors: PathBuf,
}

fn parse_enum<T: DeserializeOwned>(what: &'static str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Error::invalid(what, format!("unknown value `{s}`")))
}

fn parse_metric(name: &str, mode: DimMode) -> Result<Metric> {
    if name == "phi" {
        Ok(Metric::Phi(mode))
    } else {
        parse_enum::<AltMetric>("metric", name).map(Metric::Alt)
    }
}

/// Read two labeled matrices and keep the rows they share, sorted by label.
fn read_pair(a: &Path, b: &Path) -> Result<(LabeledMatrix, LabeledMatrix)> {
    let a = read_labeled_matrix(a)?;
    let b = read_labeled_matrix(b)?;
    let mut common: Vec<String> = a.row_labels.iter().filter(|l| b.row_labels.contains(l)).cloned().collect();
    common.sort();
    if common.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok((a.select_rows(&common)?, b.select_rows(&common)?))
}

fn load_market(ohlcv: &Path) -> Result<MarketTensor> {
    let records = read_ohlcv_csv(ohlcv)?;
    let mut assets: Vec<String> = records.iter().map(|r| r.asset.clone()).collect();
    assets.sort();
    assets.dedup();
    let grid = HourlyGrid::spanning(&records)?;
    build_tensor(&records, &assets, &grid, &BuildOptions::default())
}

struct Ctx {
    seed: u64,
    out: Option<PathBuf>,
}

impl Ctx {
    /// Write `report` as `<out>/<name>.json`, or print it.
    fn emit(&self, name: &str, report: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(report)? + "\n";
        match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(format!("{name}.json"));
                fs::write(&p, text).map_err(|e| Error::io(&p, e))
            }
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn table(&self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::io(dir.join(name), e))
    }

    fn out_dir(&self, what: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::invalid("out", format!("{what} needs --out")))
    }

    fn perm(&self, permutations: usize) -> PermutationOptions {
        PermutationOptions {
            permutations,
            seed: self.seed,
            smoothed: false,
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Some(validate_config(p)?),
        None => None,
    };
    let ctx = Ctx {
        seed: cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(tensor_align::rng::DEFAULT_SEED),
        out: cli.out.clone(),
    };
    match cli.command {
        Command::Validate => {
            config.ok_or_else(|| Error::invalid("config", "validate needs --config"))?;
            println!("config ok");
        }
        Command::Run => {
            let mut cfg = config.ok_or_else(|| Error::invalid("config", "run needs --config"))?;
            cfg.seed = ctx.seed;
            if let Some(o) = &ctx.out {
                cfg.output_dir = o.clone();
            }
            let bundle = run_study(&cfg)?;
            println!("report written to {}", bundle.dir.display());
            for p in &bundle.summary.alignment {
                println!("{:<20} phi = {:.3}  p = {:.3}", p.pair, p.mean_abs_phi, p.p_value);
            }
        }
        Command::Decompose(a) => {
            let norm: Normalization = parse_enum("normalization", &a.tensor.normalization)?;
            let x = prepare(&load_market(&a.tensor.ohlcv)?, norm)?;
            match a.method.as_str() {
                "cp" => {
                    let base = CpOptions::new(1).seed(ctx.seed);
                    let sel = select_rank(x.values(), a.target_ev, a.max_rank.max(a.rank.unwrap_or(1)), &base)?;
                    let model = match a.rank {
                        Some(0) => return Err(Error::invalid("rank", "must be at least 1")),
                        Some(r) => &sel.models[r - 1],
                        None => sel.selected(),
                    };
                    if let Some(dir) = &ctx.out {
                        save_cp_model(model, dir)?;
                        let cols: Vec<String> = (1..=model.rank).map(|k| format!("factor_{k}")).collect();
                        tensor_align::io::write_labeled_matrix(
                            dir.join("asset_factors.csv"),
                            "asset",
                            x.asset_labels(),
                            &cols,
                            &model.weighted_asset_factors(),
                        )?;
                    }
                    ctx.emit(
                        "decompose",
                        &serde_json::json!({
                            "selected_rank": model.rank,
                            "explained_variance": model.explained_variance,
                            "converged": model.converged,
                            "iterations": model.iterations,
                            "weights": model.weights,
                            "target_reached": sel.target_reached || a.rank.is_some(),
                            "curve": sel.curve,
                        }),
                    )?;
                }
                "tucker" => {
                    let r = a
                        .tucker_ranks
                        .ok_or_else(|| Error::invalid("tucker-ranks", "required for --method tucker"))?;
                    let m = tucker(x.values(), [r[0], r[1], r[2]], &TuckerOptions::default())?;
                    ctx.emit(
                        "tucker",
                        &serde_json::json!({
                            "ranks": m.ranks,
                            "explained_variance": m.explained_variance,
                        }),
                    )?;
                }
                other => return Err(Error::invalid("method", format!("unknown value `{other}`"))),
            }
        }
        Command::Stats(a) => {
            let opts = StatsOptions {
                returns: if a.log_returns { ReturnKind::Log } else { ReturnKind::Simple },
                vol_window: a.vol_window,
            };
            let raw = raw_stats_matrix(&load_market(&a.ohlcv)?, &opts)?;
            let norm = raw.normalize()?;
            let dir = ctx.out_dir("stats")?;
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            norm.write_csv(dir.join("stats_matrix.csv"))?;
            raw.write_csv(dir.join("stats_matrix_raw.csv"))?;
            println!("{} assets written to {}", raw.asset_labels.len(), dir.display());
        }
        Command::Align(a) => {
            let mode: DimMode = parse_enum("dim-mode", &a.dim_mode)?;
            let (x, y) = read_pair(&a.a, &a.b)?;
            if a.metric == "phi" {
                let r = align(&x.values, &y.values, mode)?;
                let live = r.per_dim_phi.len() - r.padded_dims;
                let dims: Vec<_> = r
                    .per_dim_phi
                    .iter()
                    .enumerate()
                    .map(|(k, phi)| serde_json::json!({"dimension": k + 1, "phi": phi, "padding": k >= live}))
                    .collect();
                ctx.table(
                    "per_dimension_phi.csv",
                    &["dimension", "phi", "padding"],
                    r.per_dim_phi
                        .iter()
                        .enumerate()
                        .map(|(k, phi)| vec![(k + 1).to_string(), phi.to_string(), (k >= live).to_string()])
                        .collect(),
                )?;
                ctx.emit(
                    "alignment",
                    &serde_json::json!({
                        "metric": Metric::Phi(mode).name(),
                        "mean_abs_phi": r.mean_abs_phi,
                        "padded_dims": r.padded_dims,
                        "n_entities": r.n_entities,
                        "entities": x.row_labels,
                        "rotation": r.rotation.q.row_iter().map(|row| row.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                        "per_dimension": dims,
                    }),
                )?;
            } else {
                let m: AltMetric = parse_enum("metric", &a.metric)?;
                let s = alt_alignment(&x.values, &y.values, m)?;
                ctx.emit(
                    "alignment",
                    &serde_json::json!({
                        "metric": a.metric,
                        "value": s.value,
                        "regularized": s.regularized,
                        "n_entities": x.row_labels.len(),
                    }),
                )?;
            }
        }
        Command::Permtest(a) => {
            let mode: DimMode = parse_enum("dim-mode", &a.pair.dim_mode)?;
            let metric = parse_metric(&a.pair.metric, mode)?;
            let (x, y) = read_pair(&a.pair.a, &a.pair.b)?;
            let mut opts = ctx.perm(a.permutations);
            opts.smoothed = a.smoothed;
            let r = permutation_test(&x.values, &y.values, &metric, &opts)?;
            ctx.table(
                "null_distribution.csv",
                &["permutation", "value"],
                r.null_samples
                    .iter()
                    .enumerate()
                    .map(|(i, v)| vec![(i + 1).to_string(), v.to_string()])
                    .collect(),
            )?;
            ctx.emit("permtest", &r)?;
        }
        Command::Bootstrap(a) => {
            let mode: DimMode = parse_enum("dim-mode", &a.pair.dim_mode)?;
            let metric = parse_metric(&a.pair.metric, mode)?;
            let (x, y) = read_pair(&a.pair.a, &a.pair.b)?;
            let r = bootstrap_ci(&x.values, &y.values, &metric, a.resamples, ctx.seed, a.level)?;
            ctx.emit("bootstrap", &r)?;
        }
        Command::Power(a) => {
            let opts = PowerOptions {
                n: a.n,
                effect_sizes: a.effects,
                iterations: a.iterations,
                permutations: a.permutations,
                alpha: a.alpha,
                seed: ctx.seed,
                ..Default::default()
            };
            let rows = power_simulation(&opts)?;
            ctx.table(
                "power.csv",
                &["true_phi", "power", "mc_se", "mc_iters", "perms_per_iter", "n"],
                rows.iter()
                    .map(|r| {
                        vec![
                            r.true_phi.to_string(),
                            r.power.to_string(),
                            r.mc_se.to_string(),
                            r.mc_iters.to_string(),
                            r.perms_per_iter.to_string(),
                            r.n.to_string(),
                        ]
                    })
                    .collect(),
            )?;
            ctx.emit("power", &rows)?;
        }
        Command::Loo(a) => {
            let mode: DimMode = parse_enum("dim-mode", &a.dim_mode)?;
            let metric = parse_metric(&a.metric, mode)?;
            let (x, y) = read_pair(&a.a, &a.b)?;
            let r = leave_one_out(&x.values, &y.values, &x.row_labels, &metric)?;
            ctx.table(
                "entity_impact.csv",
                &["entity", "impact", "phi_without"],
                r.impacts
                    .iter()
                    .map(|e| vec![e.entity.clone(), e.impact.to_string(), e.score_without.to_string()])
                    .collect(),
            )?;
            ctx.emit("loo", &r)?;
        }
        Command::Ablate(a) => {
            let mode: DimMode = parse_enum("dim-mode", &a.dim_mode)?;
            let (c, t) = read_pair(&a.claims, &a.target)?;
            let r = feature_ablation(&c.values, &c.col_labels, &t.values, &Metric::Phi(mode))?;
            ctx.table(
                "ablation.csv",
                &["category", "impact"],
                r.impacts.iter().map(|c| vec![c.category.clone(), c.impact.to_string()]).collect(),
            )?;
            ctx.emit("ablation", &r)?;
        }
        Command::Rolling(a) => {
            let norm: Normalization = parse_enum("normalization", &a.tensor.normalization)?;
            let unit: WindowUnit = parse_enum("unit", &a.unit)?;
            let market = load_market(&a.tensor.ohlcv)?;
            let claims = read_labeled_matrix(&a.claims)?;
            let mut common: Vec<String> = market
                .asset_labels()
                .iter()
                .filter(|l| claims.row_labels.contains(l))
                .cloned()
                .collect();
            common.sort();
            if common.is_empty() {
                return Err(Error::EmptyIntersection);
            }
            let opts = RollingOptions {
                window: WindowSpec {
                    length: a.length,
                    stride: a.stride,
                    unit,
                },
                stats: StatsOptions {
                    vol_window: a.vol_window,
                    ..Default::default()
                },
                dim_mode: DimMode::Pad,
                refit: a.refit_factors.then(|| CpOptions::new(a.rank).seed(ctx.seed)),
                normalization: norm,
            };
            let r = rolling_alignment(&market.select_assets(&common)?, &claims.select_rows(&common)?.values, &opts)?;
            ctx.table(
                "rolling.csv",
                &["window", "start", "end", "phi", "claims_factors_phi"],
                r.windows
                    .iter()
                    .map(|w| {
                        vec![
                            (w.index + 1).to_string(),
                            w.start.to_rfc3339(),
                            w.end.to_rfc3339(),
                            w.claims_stats.to_string(),
                            w.claims_factors.map(|v| v.to_string()).unwrap_or_default(),
                        ]
                    })
                    .collect(),
            )?;
            ctx.emit("rolling", &r)?;
        }
        Command::SplitSample(a) => {
            let norm: Normalization = parse_enum("normalization", &a.tensor.normalization)?;
            let mut opts = SplitOptions::new(a.rank);
            opts.cp = opts.cp.seed(ctx.seed);
            opts.normalization = norm;
            opts.permutation = ctx.perm(a.permutations);
            opts.stats.vol_window = a.vol_window;
            let r = split_sample(&load_market(&a.tensor.ohlcv)?, &opts)?;
            ctx.emit("split_sample", &r)?;
        }
        Command::DecomposeLoadings(a) => {
            let (s, f) = read_pair(&a.stats, &a.factors)?;
            let c = read_labeled_matrix(&a.claims)?.select_rows(&s.row_labels)?;
            let tables = factor_loading_decomposition(&s.values, &s.col_labels, &c.values, &c.col_labels, &f.values)?;
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            ctx.table(
                "loadings.csv",
                &["source", "variable", "factor", "r", "p_value", "stars"],
                tables
                    .iter()
                    .flat_map(|t| {
                        t.cells.iter().map(move |c| {
                            vec![
                                t.source.clone(),
                                c.variable.clone(),
                                c.factor.to_string(),
                                fmt(c.r),
                                fmt(c.p_value),
                                c.stars.clone(),
                            ]
                        })
                    })
                    .collect(),
            )?;
            ctx.emit("loadings", &tables)?;
        }
        Command::Synth => {
            let dir = ctx.out_dir("synth")?;
            let fx = tensor_align::synthetic::write_study_fixture(dir, ctx.seed)?;
            println!("config written to {}", fx.config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
