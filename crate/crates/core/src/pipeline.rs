//! End-to-end analysis: run table → per-budget optima → surge fits →
//! power laws → consolidated exponents → final laws → recommendation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extrapolate::{fit_bstar_drift, recommend, DriftOptions, Recommendation};
use crate::numfmt::{finite_or_null, fmt_sig17};
use crate::powerlaw::{
    combine_estimates, consolidate_exponent, fit_powerlaw, refit_fixed_exponent, ConsolidatedExponent, LawPoint,
    LawSigmas, LawTarget, PowerLawFitOptions, PowerLawParams,
};
use crate::profile::{
    best_loss_per_batch, build_profile, optimal_batch, sensitivity_curve, ModelKey, OptimumMethod, ProfileContext,
    SensitivityPoint,
};
use crate::run_store::{aggregate_optima, filter, ingest_csv, AggregateOptions, Constraint, RunFilter, RunSet};
use crate::schedule::{ScheduleSpec, DEFAULT_WARMUP_TOKENS};
use crate::surge::{eval_surge, fit_all_budgets, FitVariant, ResidualSpace, SurgeFitOptions, SurgeReport};

/// Minimum number of fitted budgets for the power-law stage.
pub const MIN_BUDGETS: usize = 4;

pub const PLOT_DATA_NAMES: [&str; 4] = ["sensitivity", "surge", "laws", "bstar"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub variants: Vec<FitVariant>,
    /// μP base to analyse; required when the input holds several.
    pub d_model_base: Option<u32>,
    /// Restrict to one width. Also selects the model for the B* drift and
    /// sensitivity tables (default: the largest width).
    pub d_model: Option<u32>,
    /// Pool optima across the widths of the family.
    pub pool_family: bool,
    pub method: OptimumMethod,
    pub residual_space: ResidualSpace,
    pub target_tokens: Option<f64>,
    /// Use this B* instead of the drift-fit extrapolation.
    pub b_star: Option<f64>,
    pub grid_snap: bool,
    pub warmup_tokens: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variants: FitVariant::ALL.to_vec(),
            d_model_base: None,
            d_model: None,
            pool_family: true,
            method: OptimumMethod::GridArgmin,
            residual_space: ResidualSpace::Linear,
            target_tokens: None,
            b_star: None,
            grid_snap: false,
            warmup_tokens: DEFAULT_WARMUP_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub d_model_base: u32,
    pub d_model: Option<u32>,
    pub pooled: bool,
    pub model: ModelKey,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumRow {
    pub batch_size: u64,
    pub tokens: u64,
    pub eta_star: f64,
    pub sigma_eta_star: f64,
    pub log2_eta_star_std: f64,
    pub n_contributing: usize,
}

/// Law with its exponent fixed to the consolidated value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLaw {
    pub target: LawTarget,
    pub a: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_a: f64,
    pub alpha: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_alpha: f64,
    pub b: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_b: f64,
}

impl FinalLaw {
    pub fn law(&self) -> PowerLawParams {
        PowerLawParams {
            sigmas: LawSigmas {
                a: self.sigma_a,
                alpha: 0.0,
                b: self.sigma_b,
            },
            fixed_alpha: true,
            ..PowerLawParams::exact(self.target, self.a, self.alpha, self.b)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLaws {
    pub b_crit: FinalLaw,
    pub eta_crit: FinalLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchBestRow {
    pub tokens: u64,
    pub batch_size: u64,
    pub loss_min: f64,
    pub eta_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BStarDrift {
    /// (T, B*) with B* the batch size of lowest best loss at T.
    pub history: Vec<(u64, u64)>,
    pub table: Vec<BatchBestRow>,
    pub law: Option<PowerLawParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub batch_size: u64,
    pub tokens: u64,
    pub eta_star: f64,
    pub loss_min: f64,
    pub points: Vec<SensitivityPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationReport {
    #[serde(flatten)]
    pub recommendation: Recommendation,
    pub schedule: ScheduleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub tool: String,
    pub version: String,
    pub input_digest: String,
    pub provenance: String,
    pub config: PipelineConfig,
    pub selection: Selection,
    pub optima: Vec<OptimumRow>,
    pub surge_fits: Vec<SurgeReport>,
    pub powerlaw_fits: Vec<PowerLawParams>,
    pub consolidated: Vec<ConsolidatedExponent>,
    pub final_laws: FinalLaws,
    pub b_star_drift: BStarDrift,
    pub recommendation: Option<RecommendationReport>,
    pub sensitivity: Vec<SensitivityTable>,
    pub warnings: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Ingests CSV bytes and runs the pipeline; the digest covers the bytes.
pub fn run_pipeline_csv(bytes: &[u8], provenance: &str, config: &PipelineConfig) -> Result<PipelineReport> {
    let rs = ingest_csv(bytes, provenance).map_err(|e| e.in_stage("ingest"))?;
    run_pipeline(&rs, sha256_hex(bytes), config)
}

/// Restricts the runs to one μP base (and optionally one width).
pub fn select(rs: &RunSet, config: &PipelineConfig) -> Result<(RunSet, Selection)> {
    let bases = rs.distinct(|r| r.d_model_base);
    let base = match (config.d_model_base, bases.as_slice()) {
        (Some(b), _) => b,
        (None, [only]) => *only,
        (None, many) => {
            return Err(Error::invalid(format!(
                "input holds {} μP bases {:?}; choose one",
                many.len(),
                many
            )))
        }
    };
    let mut f = RunFilter::new().d_model_base(Constraint::Eq(base));
    if let Some(d) = config.d_model {
        f = f.d_model(Constraint::Eq(d));
    }
    let sub = filter(rs, &f);
    if sub.is_empty() {
        return Err(Error::insufficient(format!(
            "no runs for base {base}{}",
            config.d_model.map(|d| format!(", d_model {d}")).unwrap_or_default()
        )));
    }
    let widths = sub.distinct(|r| r.d_model);
    let width = config.d_model.unwrap_or(*widths.last().expect("non-empty"));
    let selection = Selection {
        d_model_base: base,
        d_model: config.d_model,
        pooled: config.pool_family,
        model: ModelKey {
            d_model: width,
            d_model_base: base,
        },
        n_records: sub.len(),
    };
    Ok((sub, selection))
}

fn law_points(series: &[(f64, f64, f64)]) -> Vec<LawPoint> {
    series
        .iter()
        .map(|&(tokens, value, sigma)| LawPoint { tokens, value, sigma })
        .collect()
}

pub fn run_pipeline(rs: &RunSet, input_digest: String, config: &PipelineConfig) -> Result<PipelineReport> {
    if config.variants.is_empty() {
        return Err(Error::invalid("no fit variants selected"));
    }
    let mut variants = config.variants.clone();
    variants.sort();
    variants.dedup();
    let mut warnings = Vec::new();

    let (sub, selection) = select(rs, config).map_err(|e| e.in_stage("select"))?;

    let table = aggregate_optima(
        &sub,
        &AggregateOptions {
            group_by_mup_family: config.pool_family,
            method: config.method,
        },
    );
    for s in &table.skipped {
        warnings.push(format!(
            "skipped cell d_model={} base={} seed={} B={} T={}: {} learning rates (need 2)",
            s.d_model, s.d_model_base, s.seed, s.batch_size, s.tokens, s.n_lr
        ));
    }
    if table.entries.is_empty() {
        return Err(Error::insufficient("no (B, T) cell produced an optimum").in_stage("aggregate"));
    }
    let optima = table
        .entries
        .iter()
        .map(|(k, e)| OptimumRow {
            batch_size: k.batch_size,
            tokens: k.tokens,
            eta_star: e.eta_star(),
            sigma_eta_star: e.sigma_eta_star(),
            log2_eta_star_std: e.log2_eta_star_std,
            n_contributing: e.n_contributing,
        })
        .collect();

    let surge_opts = SurgeFitOptions {
        residual_space: config.residual_space,
        ..Default::default()
    };
    let fits = fit_all_budgets(&table, &variants, &surge_opts).map_err(|e| e.in_stage("surge_fit"))?;
    for s in &fits.skipped {
        let v = s.variant.map(|v| format!(" ({v})")).unwrap_or_default();
        warnings.push(format!("skipped budget T={}{}: {}", s.tokens, v, s.reason));
    }
    let mut surge_fits = Vec::new();
    for (t, list) in &fits.fits {
        for p in list {
            if !p.diagnostics.converged {
                warnings.push(format!("surge fit T={t} ({}) did not converge", p.variant));
            }
            if !p.sigma_b_crit.is_finite() || !p.sigma_eta_crit.is_finite() {
                warnings.push(format!("surge fit T={t} ({}) has unidentified uncertainties", p.variant));
            }
            surge_fits.push(SurgeReport::from(p));
        }
    }

    let mut powerlaw_fits = Vec::new();
    let mut per_target: BTreeMap<LawTarget, Vec<(FitVariant, Vec<LawPoint>, PowerLawParams)>> = BTreeMap::new();
    for &v in &variants {
        for (target, is_b) in [(LawTarget::BCrit, true), (LawTarget::EtaCrit, false)] {
            let pts = law_points(&fits.series(v, is_b));
            if pts.len() < MIN_BUDGETS {
                return Err(Error::insufficient(format!(
                    "need ≥ {MIN_BUDGETS} budgets with surge fits for {target} ({v}), got {}",
                    pts.len()
                ))
                .in_stage("powerlaw_fit"));
            }
            let mut p = fit_powerlaw(&pts, target, &PowerLawFitOptions::default())
                .map_err(|e| e.in_stage("powerlaw_fit"))?;
            p.variant = Some(v);
            if p.diagnostics.is_some_and(|d| !d.converged) {
                warnings.push(format!("power-law fit {target} ({v}) did not converge"));
            }
            powerlaw_fits.push(p.clone());
            per_target.entry(target).or_default().push((v, pts, p));
        }
    }

    let mut consolidated = Vec::new();
    let mut finals = BTreeMap::new();
    for (target, entries) in &per_target {
        let (alpha_hat, sigma_alpha) = if entries.len() == 3 {
            let params: Vec<PowerLawParams> = entries.iter().map(|e| e.2.clone()).collect();
            let c = consolidate_exponent(&params).map_err(|e| e.in_stage("consolidate"))?;
            let out = (c.alpha_hat, c.sigma);
            consolidated.push(c);
            out
        } else {
            let pairs: Vec<(f64, f64)> = entries.iter().map(|e| (e.2.alpha, e.2.sigmas.alpha)).collect();
            combine_estimates(&pairs)
        };
        let mut a_est = Vec::new();
        let mut b_est = Vec::new();
        for (_, pts, _) in entries {
            let r = refit_fixed_exponent(pts, alpha_hat, *target, &PowerLawFitOptions::default())
                .map_err(|e| e.in_stage("refit"))?;
            a_est.push((r.a, r.sigmas.a));
            b_est.push((r.b, r.sigmas.b));
        }
        let (a, sigma_a) = combine_estimates(&a_est);
        let (b, sigma_b) = combine_estimates(&b_est);
        finals.insert(
            *target,
            FinalLaw {
                target: *target,
                a,
                sigma_a,
                alpha: alpha_hat,
                sigma_alpha,
                b,
                sigma_b,
            },
        );
    }
    let final_laws = FinalLaws {
        b_crit: finals.remove(&LawTarget::BCrit).expect("b_crit law"),
        eta_crit: finals.remove(&LawTarget::EtaCrit).expect("eta_crit law"),
    };

    let budgets: Vec<u64> = sub.distinct(|r| r.tokens);
    let mut history = Vec::new();
    let mut drift_table = Vec::new();
    for &t in &budgets {
        match best_loss_per_batch(&sub, selection.model, t) {
            Ok(best) => {
                for (&b, row) in &best {
                    drift_table.push(BatchBestRow {
                        tokens: t,
                        batch_size: b,
                        loss_min: row.loss_min,
                        eta_star: row.eta_star,
                    });
                }
                if let Some((b, _)) = optimal_batch(&best) {
                    history.push((t, b));
                }
            }
            Err(e) => warnings.push(format!("no optimal batch at T={t}: {e}")),
        }
    }
    let hist_f: Vec<(f64, f64)> = history.iter().map(|&(t, b)| (t as f64, b as f64)).collect();
    let drift_law = match fit_bstar_drift(&hist_f, &DriftOptions::default()) {
        Ok(l) => Some(l),
        Err(e) => {
            warnings.push(format!("B* drift fit unavailable: {e}"));
            None
        }
    };

    let recommendation = match config.target_tokens {
        None => None,
        Some(t) => {
            let (b_star, from_fit) = match (config.b_star, &drift_law) {
                (Some(b), _) => (b, false),
                (None, Some(l)) => (l.eval(t), true),
                (None, None) => {
                    return Err(Error::insufficient("no B* drift law and no B* override").in_stage("extrapolate"))
                }
            };
            let b_law = final_laws.b_crit.law();
            let e_law = final_laws.eta_crit.law();
            let mut r = recommend(b_star, &b_law, &e_law, t).map_err(|e| e.in_stage("extrapolate"))?;
            if from_fit {
                r = r.with_b_star_law(drift_law.clone().expect("drift law"));
            }
            if config.grid_snap {
                r = r.snap_to_grid();
            }
            let ratio = r.b_star_target / r.b_crit_target;
            if !(0.5..=2.0).contains(&ratio) {
                warnings.push(format!(
                    "B* ({:.4e}) and B_crit ({:.4e}) differ by more than 2x at the target horizon",
                    r.b_star_target, r.b_crit_target
                ));
            }
            let schedule = r.schedule(config.warmup_tokens).map_err(|e| e.in_stage("schedule"))?;
            Some(RecommendationReport {
                recommendation: r,
                schedule,
            })
        }
    };

    let mut sensitivity = Vec::new();
    if let Some(&t_max) = budgets.last() {
        for b in sub.distinct(|r| r.batch_size) {
            let ctx = ProfileContext {
                batch_size: b,
                tokens: t_max,
                d_model: selection.model.d_model,
                d_model_base: selection.model.d_model_base,
                seed: None,
            };
            if let Ok(p) = build_profile(&sub, ctx) {
                let c = sensitivity_curve(&p);
                sensitivity.push(SensitivityTable {
                    batch_size: b,
                    tokens: t_max,
                    eta_star: c.eta_star,
                    loss_min: c.loss_min,
                    points: c.points,
                });
            }
        }
    }

    Ok(PipelineReport {
        tool: "scalefit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        input_digest,
        provenance: rs.provenance().to_string(),
        config: config.clone(),
        selection,
        optima,
        surge_fits,
        powerlaw_fits,
        consolidated,
        final_laws,
        b_star_drift: BStarDrift {
            history,
            table: drift_table,
            law: drift_law,
        },
        recommendation,
        sensitivity,
        warnings,
    })
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// CSV series for plotting; `name` is one of [`PLOT_DATA_NAMES`].
    pub fn plot_data(&self, name: &str) -> Result<String> {
        let mut out = String::new();
        match name {
            "sensitivity" => {
                out.push_str("batch_size,tokens,eta_ratio,lr,delta_loss\n");
                for t in &self.sensitivity {
                    for p in &t.points {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{}",
                            t.batch_size,
                            t.tokens,
                            fmt_sig17(p.eta_ratio),
                            fmt_sig17(p.lr),
                            fmt_sig17(p.delta_loss)
                        );
                    }
                }
            }
            "surge" => {
                out.push_str("tokens,variant,batch_size,eta_star,sigma_eta_star,eta_fit\n");
                for f in &self.surge_fits {
                    let Some(t) = f.tokens else { continue };
                    for o in self.optima.iter().filter(|o| o.tokens == t) {
                        let fit = eval_surge(f.eta_crit, f.b_crit, o.batch_size as f64)?;
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{},{}",
                            t,
                            f.variant,
                            o.batch_size,
                            fmt_sig17(o.eta_star),
                            fmt_sig17(o.sigma_eta_star),
                            fmt_sig17(fit)
                        );
                    }
                }
            }
            "laws" => {
                out.push_str("target,variant,tokens,value,sigma,final_fit\n");
                for f in &self.surge_fits {
                    let Some(t) = f.tokens else { continue };
                    for (target, value, sigma, law) in [
                        ("b_crit", f.b_crit, f.sigma_b_crit, &self.final_laws.b_crit),
                        ("eta_crit", f.eta_crit, f.sigma_eta_crit, &self.final_laws.eta_crit),
                    ] {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{},{}",
                            target,
                            f.variant,
                            t,
                            fmt_sig17(value),
                            fmt_sig17(sigma),
                            fmt_sig17(law.law().eval(t as f64))
                        );
                    }
                }
            }
            "bstar" => {
                out.push_str("tokens,batch_size,loss_min,eta_star,optimal\n");
                for r in &self.b_star_drift.table {
                    let optimal = self.b_star_drift.history.contains(&(r.tokens, r.batch_size));
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        r.tokens,
                        r.batch_size,
                        fmt_sig17(r.loss_min),
                        fmt_sig17(r.eta_star),
                        optimal
                    );
                }
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown plot data `{other}` (expected one of {})",
                    PLOT_DATA_NAMES.join(", ")
                )))
            }
        }
        Ok(out)
    }

    /// Writes the report and its intermediate artifacts into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("surge_fits.json"), serde_json::to_string_pretty(&self.surge_fits)? + "\n")?;
        fs::write(
            dir.join("powerlaw_fits.json"),
            serde_json::to_string_pretty(&self.powerlaw_fits)? + "\n",
        )?;
        fs::write(dir.join("final_laws.json"), serde_json::to_string_pretty(&self.final_laws)? + "\n")?;
        fs::write(dir.join("warnings.txt"), self.warnings.join("\n") + if self.warnings.is_empty() { "" } else { "\n" })?;
        for name in PLOT_DATA_NAMES {
            fs::write(dir.join(format!("{name}.csv")), self.plot_data(name)?)?;
        }
        if let Some(r) = &self.recommendation {
            fs::write(dir.join("recommendation.json"), serde_json::to_string_pretty(r)? + "\n")?;
        }
        Ok(())
    }
}
