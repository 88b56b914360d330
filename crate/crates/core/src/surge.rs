//! The surge equation η*(B) = η_crit / (√(B/B_crit) + √(B_crit/B)) and its
//! per-budget weighted fits under three uncertainty-handling variants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{levenberg_marquardt, scaled_covariance, sigmas, LmConfig};
use crate::numfmt::finite_or_null;
use crate::run_store::OptimumTable;

/// Uncertainty assigned to zero-sigma points by [`FitVariant::EpsFloor`].
pub const EPS_SIGMA: f64 = 1e-15;

/// Optimal learning rate at batch size `b` for a surge curve peaking at
/// `b_crit` with value `eta_crit / 2`.
pub fn eval_surge(eta_crit: f64, b_crit: f64, b: f64) -> Result<f64> {
    if !(eta_crit > 0.0 && b_crit > 0.0 && b > 0.0) {
        return Err(Error::invalid(format!(
            "surge arguments must be positive (eta_crit = {eta_crit}, b_crit = {b_crit}, B = {b})"
        )));
    }
    Ok(surge(eta_crit, b_crit, b))
}

#[inline]
pub(crate) fn surge(eta_crit: f64, b_crit: f64, b: f64) -> f64 {
    eta_crit / ((b / b_crit).sqrt() + (b_crit / b).sqrt())
}

/// Sigma-handling policy of a surge fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitVariant {
    /// Unit weights; input sigmas ignored.
    NoError,
    /// Input sigmas, zeros replaced by [`EPS_SIGMA`].
    EpsFloor,
    /// Input sigmas, zeros replaced by the mean of the nonzero ones.
    MeanSigma,
}

impl FitVariant {
    pub const ALL: [FitVariant; 3] = [FitVariant::NoError, FitVariant::EpsFloor, FitVariant::MeanSigma];

    pub fn as_str(self) -> &'static str {
        match self {
            FitVariant::NoError => "no_error",
            FitVariant::EpsFloor => "eps_floor",
            FitVariant::MeanSigma => "mean_sigma",
        }
    }

    pub fn sigma_policy(self) -> &'static str {
        match self {
            FitVariant::NoError => "all weights 1",
            FitVariant::EpsFloor => "zero sigmas replaced by 1e-15",
            FitVariant::MeanSigma => "zero sigmas replaced by the mean of the nonzero sigmas",
        }
    }

    /// Effective per-point sigmas. When every sigma would be undefined
    /// (mean-sigma with no nonzero input) unit weights are used.
    pub fn effective_sigmas(self, sigmas: &[f64]) -> Vec<f64> {
        match self {
            FitVariant::NoError => vec![1.0; sigmas.len()],
            FitVariant::EpsFloor => sigmas.iter().map(|&s| if s > 0.0 { s } else { EPS_SIGMA }).collect(),
            FitVariant::MeanSigma => {
                let nonzero: Vec<f64> = sigmas.iter().copied().filter(|s| *s > 0.0).collect();
                if nonzero.is_empty() {
                    return vec![1.0; sigmas.len()];
                }
                let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
                sigmas.iter().map(|&s| if s > 0.0 { s } else { mean }).collect()
            }
        }
    }
}

impl fmt::Display for FitVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FitVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_error" | "no-error" => Ok(FitVariant::NoError),
            "eps_floor" | "eps" => Ok(FitVariant::EpsFloor),
            "mean_sigma" | "mean-sigma" => Ok(FitVariant::MeanSigma),
            other => Err(Error::invalid(format!("unknown fit variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurgePoint {
    pub batch_size: f64,
    pub eta_star: f64,
    pub sigma: f64,
}

/// Space in which residuals are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSpace {
    #[default]
    Linear,
    /// ln η* residuals with sigmas propagated as σ/η*.
    Log,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SurgeFitOptions {
    pub residual_space: ResidualSpace,
    pub lm: LmConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub residual_norm: f64,
    pub n_points: usize,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeParams {
    pub eta_crit: f64,
    pub b_crit: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_eta_crit: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_b_crit: f64,
    pub variant: FitVariant,
    pub tokens: Option<u64>,
    pub diagnostics: FitDiagnostics,
}

/// Flat per-budget fit record used in JSON reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeReport {
    pub tokens: Option<u64>,
    pub variant: FitVariant,
    pub eta_crit: f64,
    pub b_crit: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_eta_crit: f64,
    #[serde(with = "finite_or_null")]
    pub sigma_b_crit: f64,
    pub residual_norm: f64,
    pub converged: bool,
}

impl From<&SurgeParams> for SurgeReport {
    fn from(p: &SurgeParams) -> Self {
        Self {
            tokens: p.tokens,
            variant: p.variant,
            eta_crit: p.eta_crit,
            b_crit: p.b_crit,
            sigma_eta_crit: p.sigma_eta_crit,
            sigma_b_crit: p.sigma_b_crit,
            residual_norm: p.diagnostics.residual_norm,
            converged: p.diagnostics.converged,
        }
    }
}

/// Weighted least-squares fit of the surge equation to (B, η*, σ) points.
///
/// Parameters are optimized as (ln η_crit, ln B_crit). The covariance is
/// rescaled by the reduced chi-square, so only relative sigmas matter.
pub fn fit_surge(points: &[SurgePoint], variant: FitVariant, opts: &SurgeFitOptions) -> Result<SurgeParams> {
    if points.len() < 3 {
        return Err(Error::insufficient(format!(
            "surge fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    for p in points {
        if !(p.batch_size > 0.0 && p.eta_star > 0.0) || !(p.sigma >= 0.0) {
            return Err(Error::invalid(format!("invalid surge point {p:?}")));
        }
    }
    let mut bs: Vec<f64> = points.iter().map(|p| p.batch_size).collect();
    bs.sort_by(f64::total_cmp);
    bs.dedup();
    if bs.len() < 3 {
        return Err(Error::insufficient("surge fit needs at least 3 distinct batch sizes"));
    }

    let raw_sigmas: Vec<f64> = points.iter().map(|p| p.sigma).collect();
    let sig = variant.effective_sigmas(&raw_sigmas);
    let ln_b: Vec<f64> = points.iter().map(|p| p.batch_size.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.eta_star).collect();
    let m = points.len();
    let space = opts.residual_space;

    let peak = points
        .iter()
        .max_by(|a, b| a.eta_star.total_cmp(&b.eta_star))
        .expect("non-empty");
    let x0 = DVector::from_vec(vec![(2.0 * peak.eta_star).ln(), peak.batch_size.ln()]);

    let eval = |x: &DVector<f64>| {
        let mut r = DVector::zeros(m);
        let mut j = DMatrix::zeros(m, 2);
        for i in 0..m {
            let u = 0.5 * (ln_b[i] - x[1]);
            let t = u.tanh();
            match space {
                ResidualSpace::Linear => {
                    let f = x[0].exp() / (u.exp() + (-u).exp());
                    r[i] = (y[i] - f) / sig[i];
                    j[(i, 0)] = -f / sig[i];
                    j[(i, 1)] = -0.5 * f * t / sig[i];
                }
                ResidualSpace::Log => {
                    let s = sig[i] / y[i];
                    let lnf = x[0] - (u.exp() + (-u).exp()).ln();
                    r[i] = (y[i].ln() - lnf) / s;
                    j[(i, 0)] = -1.0 / s;
                    j[(i, 1)] = -0.5 * t / s;
                }
            }
        }
        r.iter().all(|v| v.is_finite()).then_some((r, j))
    };

    let out = levenberg_marquardt(x0, eval, &opts.lm)
        .ok_or_else(|| Error::invalid("surge model undefined at the initial guess"))?;
    let eta_crit = out.params[0].exp();
    let b_crit = out.params[1].exp();
    let mut jn = out.jacobian.clone();
    jn.column_mut(0).scale_mut(1.0 / eta_crit);
    jn.column_mut(1).scale_mut(1.0 / b_crit);
    let cov = scaled_covariance(&jn, out.residuals.norm_squared());
    let s = sigmas(cov.as_ref(), 2);

    Ok(SurgeParams {
        eta_crit,
        b_crit,
        sigma_eta_crit: s[0],
        sigma_b_crit: s[1],
        variant,
        tokens: None,
        diagnostics: FitDiagnostics {
            residual_norm: out.residual_norm(),
            n_points: m,
            converged: out.converged,
            iterations: out.iterations,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedBudget {
    pub tokens: u64,
    pub variant: Option<FitVariant>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetFits {
    pub fits: BTreeMap<u64, Vec<SurgeParams>>,
    pub skipped: Vec<SkippedBudget>,
}

impl BudgetFits {
    /// (T, B_crit, σ) or (T, η_crit, σ) series for one variant, ascending T.
    pub fn series(&self, variant: FitVariant, b_crit: bool) -> Vec<(f64, f64, f64)> {
        self.fits
            .iter()
            .filter_map(|(&t, fits)| {
                fits.iter().find(|f| f.variant == variant).map(|f| {
                    if b_crit {
                        (t as f64, f.b_crit, f.sigma_b_crit)
                    } else {
                        (t as f64, f.eta_crit, f.sigma_eta_crit)
                    }
                })
            })
            .collect()
    }
}

/// Surge points of one budget taken from an optimum table.
pub fn budget_points(table: &OptimumTable, tokens: u64) -> Vec<SurgePoint> {
    table
        .entries
        .iter()
        .filter(|(k, _)| k.tokens == tokens)
        .map(|(k, e)| SurgePoint {
            batch_size: k.batch_size as f64,
            eta_star: e.eta_star(),
            sigma: e.sigma_eta_star(),
        })
        .collect()
}

/// Fits every budget of a single-series optimum table under each variant.
/// Budgets with fewer than 3 batch sizes are skipped with a diagnostic.
pub fn fit_all_budgets(table: &OptimumTable, variants: &[FitVariant], opts: &SurgeFitOptions) -> Result<BudgetFits> {
    let series = table.series();
    if series.len() > 1 {
        return Err(Error::invalid(format!(
            "optimum table holds {} model series; select a single μP base (and width when not pooling)",
            series.len()
        )));
    }
    let budgets: std::collections::BTreeSet<u64> = table.entries.keys().map(|k| k.tokens).collect();
    let mut out = BudgetFits::default();
    for t in budgets {
        let points = budget_points(table, t);
        if points.len() < 3 {
            out.skipped.push(SkippedBudget {
                tokens: t,
                variant: None,
                reason: format!("only {} batch sizes with optima (need 3)", points.len()),
            });
            continue;
        }
        let mut fits = Vec::with_capacity(variants.len());
        for &v in variants {
            match fit_surge(&points, v, opts) {
                Ok(mut p) => {
                    p.tokens = Some(t);
                    fits.push(p);
                }
                Err(e) => out.skipped.push(SkippedBudget {
                    tokens: t,
                    variant: Some(v),
                    reason: e.to_string(),
                }),
            }
        }
        if !fits.is_empty() {
            out.fits.insert(t, fits);
        }
    }
    Ok(out)
}
