use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use scalefit::extrapolate::{recommend, Recommendation};
use scalefit::mup::{enumerate_grid, read_grid_csv, width_multipliers, write_grid_csv, GridAxes};
use scalefit::noise;
use scalefit::numfmt::{fmt_sig17, parse_real, parse_uint};
use scalefit::pipeline::{
    run_pipeline, select, sha256_hex, PipelineConfig, PipelineReport, RecommendationReport, PLOT_DATA_NAMES,
};
use scalefit::powerlaw::{combine_estimates, refit_fixed_exponent, LawPoint, LawTarget, PowerLawFitOptions, PowerLawParams};
use scalefit::profile::{build_profile, find_optimum, sensitivity_curve, OptimumMethod, ProfileContext};
use scalefit::run_store::{aggregate_optima, emit_csv, ingest_csv, AggregateOptions, RunSet};
use scalefit::schedule::{emit_step_schedule, write_step_csv, DecayKind, ScheduleSpec, WarmupMode, DEFAULT_WARMUP_TOKENS};
use scalefit::surge::{fit_all_budgets, FitVariant, SurgeFitOptions, SurgeReport};
use scalefit::synth::{gen_surface, OracleSpec};

enum CliError {
    Usage(String),
    Data(scalefit::Error),
}

impl From<scalefit::Error> for CliError {
    fn from(e: scalefit::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn real(s: &str) -> Result<f64, String> {
    parse_real(s).ok_or_else(|| format!("not a number: {s:?}"))
}

fn uint(s: &str) -> Result<u64, String> {
    parse_uint(s).ok_or_else(|| format!("not a non-negative integer: {s:?}"))
}

fn width(s: &str) -> Result<u32, String> {
    uint(s).and_then(|v| u32::try_from(v).map_err(|_| format!("width out of range: {s}")))
}

#[derive(Parser)]
#[command(name = "scalefit", version, about = "Fit and extrapolate learning-rate and batch-size scaling laws")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a run CSV and summarize it
    Ingest(IngestArgs),
    /// Loss-vs-lr profile of one (model, B, T) cell
    Profile(ProfileArgs),
    /// Per-budget surge fits
    FitSurge(FitSurgeArgs),
    /// Power laws for B_crit(T) and eta_crit(T)
    FitPowerlaw(FitPowerlawArgs),
    /// Recommend (B*, eta*) at a target token horizon
    Extrapolate(ExtrapolateArgs),
    /// Learning-rate schedule spec and step table
    Schedule(ScheduleArgs),
    /// Width multipliers for a model relative to its base
    Mup(MupArgs),
    /// Emit the sweep grid as a run CSV with empty losses
    Grid(GridArgs),
    /// Noise-scale and critical-batch formulas
    Noise {
        #[command(subcommand)]
        formula: NoiseFormula,
    },
    /// Synthetic loss surface with known laws
    Synth(SynthArgs),
    /// Full analysis with all artifacts
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(alias = "no_error")]
    NoError,
    #[value(alias = "eps_floor")]
    Eps,
    #[value(alias = "mean_sigma")]
    MeanSigma,
    All,
}

impl VariantArg {
    fn variants(self) -> Vec<FitVariant> {
        match self {
            VariantArg::NoError => vec![FitVariant::NoError],
            VariantArg::Eps => vec![FitVariant::EpsFloor],
            VariantArg::MeanSigma => vec![FitVariant::MeanSigma],
            VariantArg::All => FitVariant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    GridArgmin,
    LogParabola,
}

impl From<MethodArg> for OptimumMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::GridArgmin => OptimumMethod::GridArgmin,
            MethodArg::LogParabola => OptimumMethod::LogParabola,
        }
    }
}

#[derive(Args)]
struct InputArgs {
    /// Run CSV
    #[arg(long)]
    input: PathBuf,
}

impl InputArgs {
    fn load(&self) -> Result<(RunSet, String), CliError> {
        let bytes = fs::read(&self.input)?;
        let rs = ingest_csv(bytes.as_slice(), &self.input.display().to_string())?;
        Ok((rs, sha256_hex(&bytes)))
    }
}

#[derive(Args)]
struct AnalysisArgs {
    #[command(flatten)]
    input: InputArgs,
    /// JSON pipeline config; flags given here take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// μP base width to analyse
    #[arg(long, value_parser = width)]
    base: Option<u32>,
    /// Restrict to one width
    #[arg(long, value_parser = width)]
    d_model: Option<u32>,
    /// How eta* is read off each profile
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Aggregate optima per width instead of pooling the family
    #[arg(long)]
    no_pool: bool,
}

impl AnalysisArgs {
    fn config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_slice(&fs::read(p)?)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variants = v.variants();
        }
        if self.base.is_some() {
            cfg.d_model_base = self.base;
        }
        if self.d_model.is_some() {
            cfg.d_model = self.d_model;
        }
        if let Some(m) = self.method {
            cfg.method = m.into();
        }
        if self.no_pool {
            cfg.pool_family = false;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Re-emit the validated runs as CSV instead of a JSON summary
    #[arg(long)]
    emit_csv: bool,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_parser = uint)]
    batch_size: u64,
    #[arg(long, value_parser = uint)]
    tokens: u64,
    #[arg(long, value_parser = width)]
    d_model: u32,
    #[arg(long, value_parser = width)]
    base: u32,
    /// Use one seed instead of the seed average
    #[arg(long, allow_negative_numbers = true)]
    seed: Option<i64>,
    #[arg(long, value_enum, default_value = "grid-argmin")]
    method: MethodArg,
}

#[derive(Args)]
struct FitSurgeArgs {
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Only this budget
    #[arg(long, value_parser = uint)]
    tokens: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LawArg {
    BCrit,
    EtaCrit,
}

impl From<LawArg> for LawTarget {
    fn from(l: LawArg) -> Self {
        match l {
            LawArg::BCrit => LawTarget::BCrit,
            LawArg::EtaCrit => LawTarget::EtaCrit,
        }
    }
}

#[derive(Args)]
struct FitPowerlawArgs {
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Refit with this exponent held fixed
    #[arg(long, value_parser = real, allow_negative_numbers = true)]
    fix_exponent: Option<f64>,
    /// Law the fixed exponent applies to
    #[arg(long, value_enum, default_value = "b-crit", requires = "fix_exponent")]
    law: LawArg,
    /// Write b_crit_law.json and eta_crit_law.json here
    #[arg(long, env = "SCALEFIT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtrapolateArgs {
    #[arg(long, value_parser = real)]
    target_tokens: f64,
    /// Report from `report`; supplies both laws and the B* drift law
    #[arg(long, conflicts_with_all = ["b_crit_law", "eta_crit_law"])]
    report: Option<PathBuf>,
    /// Power-law JSON for B_crit(T)
    #[arg(long, requires = "eta_crit_law")]
    b_crit_law: Option<PathBuf>,
    /// Power-law JSON for eta_crit(T)
    #[arg(long, requires = "b_crit_law")]
    eta_crit_law: Option<PathBuf>,
    /// Batch size to use at the target (tokens)
    #[arg(long, value_parser = real)]
    b_star: Option<f64>,
    /// Power-law JSON for B*(T)
    #[arg(long, conflicts_with = "b_star")]
    b_star_law: Option<PathBuf>,
    /// Snap B* to the nearest power of two
    #[arg(long)]
    grid_snap: bool,
    #[arg(long, value_parser = uint, default_value_t = DEFAULT_WARMUP_TOKENS)]
    warmup_tokens: u64,
    /// Write recommendation.json and summary.txt here
    #[arg(long, env = "SCALEFIT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecayArg {
    None,
    Linear,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitArg {
    Csv,
    Json,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, value_parser = real)]
    eta_max: f64,
    #[arg(long, value_parser = uint)]
    total_tokens: u64,
    #[arg(long, value_parser = uint, conflicts_with_all = ["warmup_fraction", "no_warmup"])]
    warmup_tokens: Option<u64>,
    #[arg(long, value_parser = real, conflicts_with = "no_warmup")]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    no_warmup: bool,
    #[arg(long, value_enum, default_value = "none")]
    decay: DecayArg,
    #[arg(long, value_parser = uint)]
    decay_tokens: Option<u64>,
    /// Cosine floor as a fraction of eta_max
    #[arg(long, value_parser = real, default_value = "0.1")]
    floor: f64,
    /// Emit the per-step table for this batch size
    #[arg(long, value_parser = uint)]
    batch_size: Option<u64>,
    #[arg(long, value_enum, requires = "batch_size")]
    emit: Option<EmitArg>,
}

#[derive(Args)]
struct MupArgs {
    #[arg(long, value_parser = width)]
    d_model: u32,
    #[arg(long, value_parser = width)]
    base: u32,
}

#[derive(Args)]
struct GridArgs {
    /// JSON grid axes; defaults to the built-in sweep
    #[arg(long)]
    axes: Option<PathBuf>,
    /// Keep only this base
    #[arg(long, value_parser = width)]
    base: Option<u32>,
    /// Output CSV file (stdout if absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Oracle spec JSON; omitted fields take their defaults
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Grid CSV from `grid`; defaults to the built-in sweep
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Keep only this base of the built-in sweep
    #[arg(long, value_parser = width, conflicts_with = "grid")]
    base: Option<u32>,
    /// Overrides the spec seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec noise level
    #[arg(long, value_parser = real)]
    noise_sigma: Option<f64>,
    /// Output CSV file (stdout if absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(long, value_parser = real)]
    target_tokens: Option<f64>,
    #[arg(long, value_parser = real)]
    b_star: Option<f64>,
    #[arg(long)]
    grid_snap: bool,
    #[arg(long, value_parser = uint)]
    warmup_tokens: Option<u64>,
    /// Write every artifact to this directory
    #[arg(long, env = "SCALEFIT_OUT")]
    out: Option<PathBuf>,
    /// Print one plot-data CSV (sensitivity, surge, laws, bstar)
    #[arg(long, conflicts_with = "warnings")]
    plot_data: Option<String>,
    /// Print the warnings, one per line
    #[arg(long)]
    warnings: bool,
}

#[derive(Subcommand)]
enum NoiseFormula {
    /// B_crit = E_min / S_min
    CritRatio {
        #[arg(long, value_parser = real)]
        e_min: f64,
        #[arg(long, value_parser = real)]
        s_min: f64,
    },
    /// tr(H Sigma) / (G^T H G)
    NoiseCurv {
        #[arg(long, value_parser = real)]
        tr_h_sigma: f64,
        #[arg(long, value_parser = real)]
        gt_h_g: f64,
    },
    /// tr(Sigma) / |G|^2
    SimpleCurv {
        #[arg(long, value_parser = real)]
        tr_sigma: f64,
        #[arg(long, value_parser = real)]
        g_sq: f64,
    },
    /// B0 / L^(1/alpha_B)
    CritFromLoss {
        #[arg(long, value_parser = real)]
        b0: f64,
        #[arg(long, value_parser = real, allow_negative_numbers = true)]
        alpha_b: f64,
        #[arg(long, value_parser = real)]
        loss: f64,
    },
    /// Noise scale from the SGD temperature
    NoiseSde {
        #[arg(long, value_parser = real)]
        eta: f64,
        #[arg(long, value_parser = real)]
        t_examples: f64,
        #[arg(long, value_parser = real)]
        batch_size: f64,
    },
    /// Temperature normalized by the weight norm
    NoiseNorm {
        #[arg(long, value_parser = real)]
        eta: f64,
        #[arg(long, value_parser = real)]
        t_examples: f64,
        #[arg(long, value_parser = real)]
        batch_size: f64,
        #[arg(long, value_parser = real)]
        w_norm_sq: f64,
    },
    /// Surge optimum with its peak at b_peak
    EtaStarLi {
        #[arg(long, value_parser = real)]
        eta_crit: f64,
        #[arg(long, value_parser = real)]
        b_peak: f64,
        #[arg(long, value_parser = real)]
        batch_size: f64,
    },
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    io::stdout().write_all(s.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn ingest(args: IngestArgs) -> CliResult {
    let (rs, digest) = args.input.load()?;
    if args.emit_csv {
        emit_csv(&rs, io::stdout().lock())?;
        return Ok(());
    }
    #[derive(Serialize)]
    struct Summary {
        input_digest: String,
        n_records: usize,
        d_model_base: Vec<u32>,
        d_model: Vec<u32>,
        batch_sizes: Vec<u64>,
        tokens: Vec<u64>,
        seeds: Vec<i64>,
        n_learning_rates: usize,
    }
    print_json(&Summary {
        input_digest: digest,
        n_records: rs.len(),
        d_model_base: rs.distinct(|r| r.d_model_base),
        d_model: rs.distinct(|r| r.d_model),
        batch_sizes: rs.distinct(|r| r.batch_size),
        tokens: rs.distinct(|r| r.tokens),
        seeds: rs.distinct(|r| r.seed),
        n_learning_rates: rs.distinct(|r| r.lr.to_bits()).len(),
    })
}

fn profile(args: ProfileArgs) -> CliResult {
    let (rs, _) = args.input.load()?;
    let ctx = ProfileContext {
        batch_size: args.batch_size,
        tokens: args.tokens,
        d_model: args.d_model,
        d_model_base: args.base,
        seed: args.seed,
    };
    let p = build_profile(&rs, ctx)?;
    #[derive(Serialize)]
    struct Out<'a> {
        context: &'a ProfileContext,
        points: &'a [scalefit::profile::ProfilePoint],
        optimum: scalefit::profile::OptimumEstimate,
        sensitivity: scalefit::profile::SensitivityCurve,
    }
    print_json(&Out {
        context: p.context(),
        points: p.points(),
        optimum: find_optimum(&p, args.method.into()),
        sensitivity: sensitivity_curve(&p),
    })
}

fn fit_surge(args: FitSurgeArgs) -> CliResult {
    let (rs, _) = args.analysis.input.load()?;
    let cfg = args.analysis.config()?;
    let (sub, selection) = select(&rs, &cfg)?;
    let mut table = aggregate_optima(
        &sub,
        &AggregateOptions {
            group_by_mup_family: cfg.pool_family,
            method: cfg.method,
        },
    );
    if let Some(t) = args.tokens {
        table.entries.retain(|k, _| k.tokens == t);
        if table.entries.is_empty() {
            return Err(CliError::Data(scalefit::Error::InsufficientData(format!("no optima at T = {t}"))));
        }
    }
    let fits = fit_all_budgets(
        &table,
        &cfg.variants,
        &SurgeFitOptions {
            residual_space: cfg.residual_space,
            ..Default::default()
        },
    )?;
    #[derive(Serialize)]
    struct Out {
        selection: scalefit::pipeline::Selection,
        fits: Vec<SurgeReport>,
        skipped_budgets: Vec<scalefit::surge::SkippedBudget>,
        skipped_cells: Vec<scalefit::run_store::SkippedCell>,
    }
    print_json(&Out {
        selection,
        fits: fits.fits.values().flatten().map(SurgeReport::from).collect(),
        skipped_budgets: fits.skipped,
        skipped_cells: table.skipped,
    })
}

fn fixed_refit(report: &PipelineReport, target: LawTarget, alpha: f64) -> Result<PowerLawParams, CliError> {
    let mut a_est = Vec::new();
    let mut b_est = Vec::new();
    for &v in &report.config.variants {
        let pts: Vec<LawPoint> = report
            .surge_fits
            .iter()
            .filter(|s| s.variant == v)
            .filter_map(|s| {
                let (value, sigma) = match target {
                    LawTarget::BCrit => (s.b_crit, s.sigma_b_crit),
                    _ => (s.eta_crit, s.sigma_eta_crit),
                };
                s.tokens.map(|t| LawPoint {
                    tokens: t as f64,
                    value,
                    sigma,
                })
            })
            .collect();
        let r = refit_fixed_exponent(&pts, alpha, target, &PowerLawFitOptions::default())?;
        a_est.push((r.a, r.sigmas.a));
        b_est.push((r.b, r.sigmas.b));
    }
    let (a, sa) = combine_estimates(&a_est);
    let (b, sb) = combine_estimates(&b_est);
    let mut p = PowerLawParams::exact(target, a, alpha, b);
    p.sigmas.a = sa;
    p.sigmas.b = sb;
    p.fixed_alpha = true;
    Ok(p)
}

fn fit_powerlaw(args: FitPowerlawArgs) -> CliResult {
    let (rs, digest) = args.analysis.input.load()?;
    let cfg = args.analysis.config()?;
    let report = run_pipeline(&rs, digest, &cfg)?;
    let mut b_crit = report.final_laws.b_crit.law();
    let mut eta_crit = report.final_laws.eta_crit.law();
    if let Some(alpha) = args.fix_exponent {
        let target: LawTarget = args.law.into();
        let p = fixed_refit(&report, target, alpha)?;
        match target {
            LawTarget::BCrit => b_crit = p,
            _ => eta_crit = p,
        }
    }
    #[derive(Serialize)]
    struct Out<'a> {
        powerlaw_fits: &'a [PowerLawParams],
        consolidated: &'a [scalefit::powerlaw::ConsolidatedExponent],
        b_crit_law: &'a PowerLawParams,
        eta_crit_law: &'a PowerLawParams,
        warnings: &'a [String],
    }
    print_json(&Out {
        powerlaw_fits: &report.powerlaw_fits,
        consolidated: &report.consolidated,
        b_crit_law: &b_crit,
        eta_crit_law: &eta_crit,
        warnings: &report.warnings,
    })?;
    if let Some(dir) = args.out {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("b_crit_law.json"), &b_crit)?;
        write_json(&dir.join("eta_crit_law.json"), &eta_crit)?;
    }
    Ok(())
}

fn extrapolate(args: ExtrapolateArgs) -> CliResult {
    let (b_law, e_law, drift): (PowerLawParams, PowerLawParams, Option<PowerLawParams>) =
        match (&args.report, &args.b_crit_law, &args.eta_crit_law) {
            (Some(p), _, _) => {
                let r: PipelineReport = read_json(p)?;
                (r.final_laws.b_crit.law(), r.final_laws.eta_crit.law(), r.b_star_drift.law)
            }
            (None, Some(b), Some(e)) => (read_json(b)?, read_json(e)?, None),
            _ => return Err(usage("give --report or both --b-crit-law and --eta-crit-law")),
        };
    let drift = match &args.b_star_law {
        Some(p) => Some(read_json::<PowerLawParams>(p)?),
        None => drift,
    };
    let t = args.target_tokens;
    let mut rec: Recommendation = match (args.b_star, drift) {
        (Some(b), _) => recommend(b, &b_law, &e_law, t)?,
        (None, Some(d)) => recommend(d.eval(t), &b_law, &e_law, t)?.with_b_star_law(d),
        (None, None) => return Err(usage("no B* source: give --b-star, --b-star-law, or a report with a drift law")),
    };
    if args.grid_snap {
        rec = rec.snap_to_grid();
    }
    let schedule = rec.schedule(args.warmup_tokens)?;
    let summary = rec.summary();
    let out = RecommendationReport {
        recommendation: rec,
        schedule,
    };
    print_json(&out)?;
    eprint!("{summary}");
    if let Some(dir) = args.out {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("recommendation.json"), &out)?;
        fs::write(dir.join("summary.txt"), summary)?;
    }
    Ok(())
}

fn schedule(args: ScheduleArgs) -> CliResult {
    let warmup = match (args.no_warmup, args.warmup_fraction, args.warmup_tokens) {
        (true, _, _) => WarmupMode::Disabled,
        (false, Some(f), _) => WarmupMode::Fraction { f },
        (false, None, Some(tokens)) => WarmupMode::Absolute { tokens },
        (false, None, None) => WarmupMode::Absolute {
            tokens: DEFAULT_WARMUP_TOKENS.min(args.total_tokens),
        },
    };
    let kind = match args.decay {
        DecayArg::None => DecayKind::None,
        DecayArg::Linear => DecayKind::LinearToZero,
        DecayArg::Cosine => DecayKind::CosineToFraction { floor: args.floor },
    };
    let decay_tokens = match (args.decay, args.decay_tokens) {
        (DecayArg::None, Some(d)) if d > 0 => return Err(usage("--decay-tokens needs --decay linear|cosine")),
        (DecayArg::None, _) => 0,
        (_, Some(d)) => d,
        (_, None) => return Err(usage("--decay linear|cosine needs --decay-tokens")),
    };
    let spec = ScheduleSpec::new(args.eta_max, args.total_tokens, warmup, decay_tokens, kind)?;
    match (args.batch_size, args.emit) {
        (Some(b), emit) => {
            let steps = emit_step_schedule(&spec, b)?;
            match emit.unwrap_or(EmitArg::Csv) {
                EmitArg::Csv => write_step_csv(&steps, io::stdout().lock())?,
                EmitArg::Json => print_json(&steps)?,
            }
            Ok(())
        }
        (None, _) => print_json(&spec),
    }
}

fn mup(args: MupArgs) -> CliResult {
    print_json(&width_multipliers(args.d_model, args.base)?)
}

fn default_axes(base: Option<u32>) -> Result<GridAxes, CliError> {
    let axes = GridAxes::default();
    Ok(match base {
        Some(b) => axes.only_base(b)?,
        None => axes,
    })
}

fn grid(args: GridArgs) -> CliResult {
    let mut axes = match &args.axes {
        Some(p) => read_json(p)?,
        None => GridAxes::default(),
    };
    if let Some(b) = args.base {
        axes = axes.only_base(b)?;
    }
    let points = enumerate_grid(&axes);
    match args.out {
        Some(p) => write_grid_csv(&points, fs::File::create(p)?)?,
        None => write_grid_csv(&points, io::stdout().lock())?,
    }
    Ok(())
}

fn synth(args: SynthArgs) -> CliResult {
    let mut spec: OracleSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => OracleSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.noise_sigma {
        spec.noise_sigma = n;
    }
    let points = match &args.grid {
        Some(p) => read_grid_csv(fs::File::open(p)?)?,
        None => enumerate_grid(&default_axes(args.base)?),
    };
    let rs = gen_surface(&spec, &points)?;
    match args.out {
        Some(p) => emit_csv(&rs, fs::File::create(p)?)?,
        None => emit_csv(&rs, io::stdout().lock())?,
    }
    Ok(())
}

fn report(args: ReportArgs) -> CliResult {
    if let Some(name) = &args.plot_data {
        if !PLOT_DATA_NAMES.contains(&name.as_str()) {
            return Err(usage(format!(
                "unknown plot data {name:?}; expected one of {}",
                PLOT_DATA_NAMES.join(", ")
            )));
        }
    }
    let (rs, digest) = args.analysis.input.load()?;
    let mut cfg = args.analysis.config()?;
    if args.target_tokens.is_some() {
        cfg.target_tokens = args.target_tokens;
    }
    if args.b_star.is_some() {
        cfg.b_star = args.b_star;
    }
    if args.grid_snap {
        cfg.grid_snap = true;
    }
    if let Some(w) = args.warmup_tokens {
        cfg.warmup_tokens = w;
    }
    let report = run_pipeline(&rs, digest, &cfg)?;
    if let Some(dir) = &args.out {
        report.write_artifacts(dir)?;
    }
    let mut stdout = io::stdout().lock();
    if let Some(name) = &args.plot_data {
        stdout.write_all(report.plot_data(name)?.as_bytes())?;
    } else if args.warnings {
        for w in &report.warnings {
            writeln!(stdout, "{w}")?;
        }
    } else {
        stdout.write_all(report.to_json()?.as_bytes())?;
    }
    Ok(())
}

fn noise_formula(f: NoiseFormula) -> CliResult {
    let v = match f {
        NoiseFormula::CritRatio { e_min, s_min } => noise::b_crit_ratio(e_min, s_min)?,
        NoiseFormula::NoiseCurv { tr_h_sigma, gt_h_g } => noise::b_noise_curv(tr_h_sigma, gt_h_g)?,
        NoiseFormula::SimpleCurv { tr_sigma, g_sq } => noise::b_simple_curv(tr_sigma, g_sq)?,
        NoiseFormula::CritFromLoss { b0, alpha_b, loss } => noise::b_crit_from_loss(b0, alpha_b, loss)?,
        NoiseFormula::NoiseSde {
            eta,
            t_examples,
            batch_size,
        } => noise::b_noise_sde(eta, t_examples, batch_size)?,
        NoiseFormula::NoiseNorm {
            eta,
            t_examples,
            batch_size,
            w_norm_sq,
        } => noise::b_noise_norm(eta, t_examples, batch_size, w_norm_sq)?,
        NoiseFormula::EtaStarLi {
            eta_crit,
            b_peak,
            batch_size,
        } => noise::eta_star_li(eta_crit, b_peak, batch_size)?,
    };
    println!("{}", fmt_sig17(v));
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Profile(a) => profile(a),
        Command::FitSurge(a) => fit_surge(a),
        Command::FitPowerlaw(a) => fit_powerlaw(a),
        Command::Extrapolate(a) => extrapolate(a),
        Command::Schedule(a) => schedule(a),
        Command::Mup(a) => mup(a),
        Command::Grid(a) => grid(a),
        Command::Noise { formula } => noise_formula(formula),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(scalefit::Error::Io(e))) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
