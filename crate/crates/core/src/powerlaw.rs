//! Time dependence of the critical parameters: p(T) = a·T^α + b.
//!
//! The three-parameter fit is linear in (a, b) for fixed α, so α is found by
//! minimizing the profiled chi-square and the result is then polished with
//! a joint Levenberg–Marquardt step. Uncertainties come from the covariance
//! rescaled by the reduced chi-square.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{levenberg_marquardt, scaled_covariance, sigmas, LmConfig};
use crate::numfmt::finite_or_null;
use crate::surge::{FitDiagnostics, FitVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawTarget {
    EtaCrit,
    BCrit,
    /// Optimal batch size drift B*(T).
    BStar,
}

impl fmt::Display for LawTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LawTarget::EtaCrit => "eta_crit",
            LawTarget::BCrit => "b_crit",
            LawTarget::BStar => "b_star",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LawSigmas {
    #[serde(with = "finite_or_null")]
    pub a: f64,
    #[serde(with = "finite_or_null")]
    pub alpha: f64,
    #[serde(with = "finite_or_null")]
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawParams {
    pub target: LawTarget,
    #[serde(default)]
    pub variant: Option<FitVariant>,
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    #[serde(default)]
    pub sigmas: LawSigmas,
    #[serde(default)]
    pub fixed_alpha: bool,
    /// Offset pinned to zero (pure power law).
    #[serde(default)]
    pub fixed_b: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FitDiagnostics>,
}

impl PowerLawParams {
    /// A law with the given values and no uncertainties.
    pub fn exact(target: LawTarget, a: f64, alpha: f64, b: f64) -> Self {
        Self {
            target,
            variant: None,
            a,
            alpha,
            b,
            sigmas: LawSigmas {
                a: 0.0,
                alpha: 0.0,
                b: 0.0,
            },
            fixed_alpha: false,
            fixed_b: false,
            diagnostics: None,
        }
    }

    #[inline]
    pub fn eval(&self, tokens: f64) -> f64 {
        self.a * tokens.powf(self.alpha) + self.b
    }
}

pub fn eval_powerlaw(params: &PowerLawParams, tokens: f64) -> Result<f64> {
    if !(tokens > 0.0) {
        return Err(Error::invalid(format!("power law needs T > 0, got {tokens}")));
    }
    Ok(params.eval(tokens))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawPoint {
    pub tokens: f64,
    pub value: f64,
    #[serde(with = "finite_or_null")]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// 1/σ weights; zero sigmas take the mean of the nonzero ones (unit
    /// weights if all are zero). Points with infinite σ are dropped.
    #[default]
    Sigma,
    Unit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PowerLawFitOptions {
    pub weighting: Weighting,
    pub lm: LmConfig,
}

struct Prepared {
    t: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
}

fn prepare(points: &[LawPoint], weighting: Weighting, min_points: usize) -> Result<Prepared> {
    let kept: Vec<&LawPoint> = match weighting {
        Weighting::Unit => points.iter().collect(),
        Weighting::Sigma => points.iter().filter(|p| p.sigma.is_finite()).collect(),
    };
    if kept.len() < min_points {
        return Err(Error::insufficient(format!(
            "power-law fit needs at least {min_points} points with usable uncertainties, got {}",
            kept.len()
        )));
    }
    for p in &kept {
        if !(p.tokens > 0.0) || !p.value.is_finite() || p.sigma < 0.0 {
            return Err(Error::invalid(format!("invalid power-law point {p:?}")));
        }
    }
    let mut ts: Vec<f64> = kept.iter().map(|p| p.tokens).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    if ts.len() != kept.len() {
        return Err(Error::invalid("power-law fit needs distinct T values"));
    }
    let raw: Vec<f64> = kept.iter().map(|p| p.sigma).collect();
    let s = match weighting {
        Weighting::Unit => vec![1.0; kept.len()],
        Weighting::Sigma => FitVariant::MeanSigma.effective_sigmas(&raw),
    };
    Ok(Prepared {
        t: kept.iter().map(|p| p.tokens).collect(),
        y: kept.iter().map(|p| p.value).collect(),
        s,
    })
}

/// Weighted linear least squares y ≈ c0·x + c1; returns (c0, c1, chi²).
fn linear2(x: &[f64], y: &[f64], s: &[f64]) -> Option<(f64, f64, f64)> {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let w = 1.0 / (s[i] * s[i]);
        sw += w;
        sx += w * x[i];
        sy += w * y[i];
    }
    let (mx, my) = (sx / sw, sy / sw);
    for i in 0..x.len() {
        let w = 1.0 / (s[i] * s[i]);
        let dx = x[i] - mx;
        sxx += w * dx * dx;
        sxy += w * dx * (y[i] - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let chi2 = (0..x.len())
        .map(|i| ((y[i] - slope * x[i] - icpt) / s[i]).powi(2))
        .sum::<f64>();
    chi2.is_finite().then_some((slope, icpt, chi2))
}

fn initial_alpha(t: &[f64], y: &[f64]) -> f64 {
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let b0 = if min > 0.0 { 0.9 * min } else { 1.1 * min };
    let lx: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| (v - b0).ln()).collect();
    if ly.iter().any(|v| !v.is_finite()) {
        return 1.0;
    }
    let ones = vec![1.0; t.len()];
    match linear2(&lx, &ly, &ones) {
        Some((slope, _, _)) if slope.is_finite() && slope != 0.0 => slope,
        _ => 1.0,
    }
}

/// Minimizes a unimodal function on [lo, hi] by golden-section search.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while (hi - lo).abs() > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Full three-parameter fit of p(T) = a·T^α + b.
///
/// Degenerate data (for instance constant p) yield a flagged result with
/// infinite uncertainties rather than an error.
pub fn fit_powerlaw(points: &[LawPoint], target: LawTarget, opts: &PowerLawFitOptions) -> Result<PowerLawParams> {
    let Prepared { t, y, s } = prepare(points, opts.weighting, 4)?;
    let n = t.len();
    let t_ref = (t.iter().map(|v| v.ln()).sum::<f64>() / n as f64).exp();
    let lt: Vec<f64> = t.iter().map(|v| (v / t_ref).ln()).collect();

    let profile = |alpha: f64| -> f64 {
        let x: Vec<f64> = lt.iter().map(|l| (alpha * l).exp()).collect();
        linear2(&x, &y, &s).map_or(f64::INFINITY, |(_, _, c)| c)
    };

    let alpha0 = initial_alpha(&t, &y);
    const STEP: f64 = 0.05;
    const HALF_WIDTH: i32 = 100;
    let mut best_k = 0;
    let mut best = profile(alpha0);
    for k in 1..=HALF_WIDTH {
        for kk in [k, -k] {
            let v = profile(alpha0 + kk as f64 * STEP);
            if v < best {
                best = v;
                best_k = kk;
            }
        }
    }
    let centre = alpha0 + best_k as f64 * STEP;
    let alpha_start = golden_min(profile, centre - STEP, centre + STEP, 1e-10);

    let x_start: Vec<f64> = lt.iter().map(|l| (alpha_start * l).exp()).collect();
    let (a_start, b_start, _) =
        linear2(&x_start, &y, &s).ok_or_else(|| Error::invalid("power-law profile is undefined"))?;

    let eval = |p: &DVector<f64>| {
        let (ap, alpha, b) = (p[0], p[1], p[2]);
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, 3);
        for i in 0..n {
            let x = (alpha * lt[i]).exp();
            r[i] = (y[i] - ap * x - b) / s[i];
            j[(i, 0)] = -x / s[i];
            j[(i, 1)] = -ap * x * lt[i] / s[i];
            j[(i, 2)] = -1.0 / s[i];
        }
        r.iter().all(|v| v.is_finite()).then_some((r, j))
    };
    let out = levenberg_marquardt(DVector::from_vec(vec![a_start, alpha_start, b_start]), eval, &opts.lm)
        .ok_or_else(|| Error::invalid("power-law model undefined at the initial guess"))?;

    let alpha = out.params[1];
    let a = out.params[0] * t_ref.powf(-alpha);
    let b = out.params[2];
    let mut jn = DMatrix::zeros(n, 3);
    for i in 0..n {
        let ta = t[i].powf(alpha);
        jn[(i, 0)] = ta / s[i];
        jn[(i, 1)] = a * ta * t[i].ln() / s[i];
        jn[(i, 2)] = 1.0 / s[i];
    }
    let cov = scaled_covariance(&jn, out.residuals.norm_squared());
    let sg = sigmas(cov.as_ref(), 3);
    Ok(PowerLawParams {
        target,
        variant: None,
        a,
        alpha,
        b,
        sigmas: LawSigmas {
            a: sg[0],
            alpha: sg[1],
            b: sg[2],
        },
        fixed_alpha: false,
        fixed_b: false,
        diagnostics: Some(FitDiagnostics {
            residual_norm: out.residual_norm(),
            n_points: n,
            converged: out.converged,
            iterations: out.iterations,
        }),
    })
}

/// Refit of (a, b) with the exponent held at `alpha_fixed`: a weighted
/// linear least-squares problem in the basis (T^α, 1).
pub fn refit_fixed_exponent(
    points: &[LawPoint],
    alpha_fixed: f64,
    target: LawTarget,
    opts: &PowerLawFitOptions,
) -> Result<PowerLawParams> {
    if !alpha_fixed.is_finite() {
        return Err(Error::invalid("fixed exponent must be finite"));
    }
    let Prepared { t, y, s } = prepare(points, opts.weighting, 3)?;
    let n = t.len();
    let t_ref = (t.iter().map(|v| v.ln()).sum::<f64>() / n as f64).exp();
    let x: Vec<f64> = t.iter().map(|v| (v / t_ref).powf(alpha_fixed)).collect();
    let (ap, b, chi2) = linear2(&x, &y, &s).ok_or_else(|| Error::invalid("fixed-exponent refit is undefined"))?;
    let a = ap * t_ref.powf(-alpha_fixed);
    let jn = DMatrix::from_fn(n, 2, |i, k| if k == 0 { t[i].powf(alpha_fixed) / s[i] } else { 1.0 / s[i] });
    let cov = scaled_covariance(&jn, chi2);
    let sg = sigmas(cov.as_ref(), 2);
    Ok(PowerLawParams {
        target,
        variant: None,
        a,
        alpha: alpha_fixed,
        b,
        sigmas: LawSigmas {
            a: sg[0],
            alpha: 0.0,
            b: sg[1],
        },
        fixed_alpha: true,
        fixed_b: false,
        diagnostics: Some(FitDiagnostics {
            residual_norm: chi2.sqrt(),
            n_points: n,
            converged: true,
            iterations: 0,
        }),
    })
}

/// Pure power law p = a·T^α (offset pinned to 0), fitted by unweighted
/// least squares in log-log space. `min_points` may be 2 for an exact
/// two-point slope, in which case uncertainties are infinite.
pub fn fit_pure_powerlaw(points: &[(f64, f64)], target: LawTarget, min_points: usize) -> Result<PowerLawParams> {
    let min_points = min_points.max(2);
    if points.len() < min_points {
        return Err(Error::insufficient(format!(
            "pure power-law fit needs at least {min_points} points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(t, p)| !(*t > 0.0 && *p > 0.0)) {
        return Err(Error::invalid("pure power-law fit needs positive T and values"));
    }
    let lx: Vec<f64> = points.iter().map(|(t, _)| t.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|(_, p)| p.ln()).collect();
    let mut distinct = lx.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("pure power-law fit needs at least 2 distinct T values"));
    }
    let ones = vec![1.0; lx.len()];
    let (alpha, ln_a, chi2) = linear2(&lx, &ly, &ones).ok_or_else(|| Error::invalid("log-log regression failed"))?;
    let a = ln_a.exp();
    let j = DMatrix::from_fn(lx.len(), 2, |i, k| if k == 0 { 1.0 } else { lx[i] });
    let cov = scaled_covariance(&j, chi2);
    let sg = sigmas(cov.as_ref(), 2);
    Ok(PowerLawParams {
        target,
        variant: None,
        a,
        alpha,
        b: 0.0,
        sigmas: LawSigmas {
            a: a * sg[0],
            alpha: sg[1],
            b: 0.0,
        },
        fixed_alpha: false,
        fixed_b: true,
        diagnostics: Some(FitDiagnostics {
            residual_norm: chi2.sqrt(),
            n_points: lx.len(),
            converged: true,
            iterations: 0,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentContribution {
    pub variant: Option<FitVariant>,
    pub alpha: f64,
    #[serde(with = "finite_or_null")]
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedExponent {
    pub target: LawTarget,
    pub alpha_hat: f64,
    #[serde(with = "finite_or_null")]
    pub sigma: f64,
    pub contributing: Vec<ExponentContribution>,
}

/// Combines per-variant estimates into one value: the arithmetic mean, with
/// σ² = (spread across estimates, population variance) + (mean individual σ)².
pub fn combine_estimates(values: &[(f64, f64)]) -> (f64, f64) {
    // Summation in a canonical order keeps the result permutation-invariant.
    let mut v: Vec<(f64, f64)> = values.to_vec();
    v.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let n = v.len() as f64;
    let mean = v.iter().map(|p| p.0).sum::<f64>() / n;
    let spread = v.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / n;
    let mean_sigma = v.iter().map(|p| p.1).sum::<f64>() / n;
    (mean, (spread + mean_sigma * mean_sigma).sqrt())
}

/// Averages the exponents of the three fit variants into a central value
/// with a combined systematic + statistical uncertainty.
pub fn consolidate_exponent(three: &[PowerLawParams]) -> Result<ConsolidatedExponent> {
    let Some(first) = three.first() else {
        return Err(Error::insufficient("no exponents to consolidate"));
    };
    if three.len() != 3 {
        return Err(Error::invalid(format!(
            "consolidation expects three per-variant fits, got {}",
            three.len()
        )));
    }
    if three.iter().any(|p| p.target != first.target) {
        return Err(Error::invalid("cannot consolidate exponents of different targets"));
    }
    let pairs: Vec<(f64, f64)> = three.iter().map(|p| (p.alpha, p.sigmas.alpha)).collect();
    let (alpha_hat, sigma) = combine_estimates(&pairs);
    Ok(ConsolidatedExponent {
        target: first.target,
        alpha_hat,
        sigma,
        contributing: three
            .iter()
            .map(|p| ExponentContribution {
                variant: p.variant,
                alpha: p.alpha,
                sigma: p.sigmas.alpha,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn law_b() -> PowerLawParams {
        PowerLawParams::exact(LawTarget::BCrit, 8.0e-5, 1.0, 3.0e5)
    }

    fn noiseless(law: &PowerLawParams) -> Vec<LawPoint> {
        (30..=37)
            .map(|k| {
                let t = (k as f64).exp2();
                LawPoint {
                    tokens: t,
                    value: law.eval(t),
                    sigma: 0.0,
                }
            })
            .collect()
    }

    fn with_alpha(alpha: f64, sigma: f64) -> PowerLawParams {
        let mut p = law_b();
        p.alpha = alpha;
        p.sigmas.alpha = sigma;
        p
    }

    #[test]
    fn evaluates_published_final_laws() {
        let t = 30f64.exp2();
        assert!(rel(eval_powerlaw(&law_b(), t).unwrap(), 385899.34592) < 1e-9);
        let eta = PowerLawParams::exact(LawTarget::EtaCrit, 2.0e9, -1.3, 3.1e-3);
        let v = eval_powerlaw(&eta, t).unwrap();
        assert!((v - 6.738e-3).abs() < 1e-6, "{v}");
        let flat = PowerLawParams::exact(LawTarget::BCrit, 0.0, 3.7, 42.0);
        assert_eq!(flat.eval(12345.0), 42.0);
        assert!(eval_powerlaw(&flat, 0.0).is_err());
    }

    #[test]
    fn noiseless_fit_recovers_law() {
        let fit = fit_powerlaw(&noiseless(&law_b()), LawTarget::BCrit, &Default::default()).unwrap();
        assert!(rel(fit.a, 8e-5) < 1e-6, "a = {}", fit.a);
        assert!(rel(fit.alpha, 1.0) < 1e-6, "alpha = {}", fit.alpha);
        assert!(rel(fit.b, 3e5) < 1e-6, "b = {}", fit.b);
        assert!(fit.diagnostics.unwrap().converged);
    }

    #[test]
    fn noiseless_fit_recovers_decreasing_law() {
        let law = PowerLawParams::exact(LawTarget::EtaCrit, 2.0e9, -1.3, 3.1e-3);
        let fit = fit_powerlaw(&noiseless(&law), LawTarget::EtaCrit, &Default::default()).unwrap();
        assert!(rel(fit.alpha, -1.3) < 1e-6, "alpha = {}", fit.alpha);
        assert!(rel(fit.a, 2.0e9) < 1e-5, "a = {}", fit.a);
        assert!(rel(fit.b, 3.1e-3) < 1e-6, "b = {}", fit.b);
    }

    #[test]
    fn monte_carlo_alpha_median_within_band() {
        let law = law_b();
        let n = Normal::new(0.0, 0.1).unwrap();
        let mut alphas = Vec::new();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<LawPoint> = noiseless(&law)
                .into_iter()
                .map(|p| LawPoint {
                    value: p.value * (1.0 + n.sample(&mut rng)),
                    ..p
                })
                .collect();
            alphas.push(fit_powerlaw(&pts, LawTarget::BCrit, &Default::default()).unwrap().alpha);
        }
        alphas.sort_by(f64::total_cmp);
        let median = 0.5 * (alphas[9] + alphas[10]);
        assert!((median - 1.0).abs() <= 0.2, "median alpha {median}");
    }

    #[test]
    fn constant_data_is_flagged_not_an_error() {
        let pts: Vec<LawPoint> = (30..=35)
            .map(|k| LawPoint {
                tokens: (k as f64).exp2(),
                value: 5.0,
                sigma: 0.1,
            })
            .collect();
        let fit = fit_powerlaw(&pts, LawTarget::BCrit, &Default::default()).unwrap();
        assert!(fit.sigmas.alpha > 1e6 || fit.sigmas.alpha.is_infinite());
        assert!((fit.eval(33f64.exp2()) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_points() {
        let pts = &noiseless(&law_b())[..3];
        assert!(fit_powerlaw(pts, LawTarget::BCrit, &Default::default()).is_err());
        assert!(refit_fixed_exponent(&pts[..2], 1.0, LawTarget::BCrit, &Default::default()).is_err());
    }

    #[test]
    fn fixed_exponent_refit_is_exact_linear_solve() {
        let pts = noiseless(&law_b());
        let fit = refit_fixed_exponent(&pts, 1.0, LawTarget::BCrit, &Default::default()).unwrap();
        assert!(rel(fit.a, 8e-5) < 1e-12);
        assert!(rel(fit.b, 3e5) < 1e-10);
        assert!(fit.fixed_alpha);
        assert_eq!(fit.sigmas.alpha, 0.0);
    }

    #[test]
    fn wrong_fixed_exponent_leaves_residual() {
        let pts = noiseless(&law_b());
        let free = fit_powerlaw(&pts, LawTarget::BCrit, &Default::default()).unwrap();
        let half = refit_fixed_exponent(&pts, 0.5, LawTarget::BCrit, &Default::default()).unwrap();
        let r_half = half.diagnostics.unwrap().residual_norm;
        assert!(r_half > 1e3, "residual {r_half}");
        assert!(r_half >= free.diagnostics.unwrap().residual_norm);
    }

    #[test]
    fn refit_at_free_alpha_agrees_within_uncertainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 0.05).unwrap();
        let pts: Vec<LawPoint> = noiseless(&law_b())
            .into_iter()
            .map(|p| LawPoint {
                value: p.value * (1.0 + n.sample(&mut rng)),
                sigma: 0.05 * p.value,
                ..p
            })
            .collect();
        let free = fit_powerlaw(&pts, LawTarget::BCrit, &Default::default()).unwrap();
        let fixed = refit_fixed_exponent(&pts, free.alpha, LawTarget::BCrit, &Default::default()).unwrap();
        assert!((fixed.a - free.a).abs() <= free.sigmas.a);
        assert!((fixed.b - free.b).abs() <= free.sigmas.b);
        assert!(fixed.diagnostics.unwrap().residual_norm >= free.diagnostics.unwrap().residual_norm * (1.0 - 1e-9));
    }

    #[test]
    fn pure_power_law_slopes() {
        let three = [(30f64.exp2(), 18f64.exp2()), (32f64.exp2(), 19f64.exp2()), (34f64.exp2(), 20f64.exp2())];
        let fit = fit_pure_powerlaw(&three, LawTarget::BStar, 3).unwrap();
        assert!((fit.alpha - 0.5).abs() < 1e-12);
        assert!(rel(fit.a, 8.0) < 1e-10);
        let two = [(30f64.exp2(), 18f64.exp2()), (35f64.exp2(), 20f64.exp2())];
        assert!(fit_pure_powerlaw(&two, LawTarget::BStar, 3).is_err());
        let forced = fit_pure_powerlaw(&two, LawTarget::BStar, 2).unwrap();
        assert!((forced.alpha - 0.4).abs() < 1e-12);
        assert!(forced.sigmas.alpha.is_infinite());
    }

    #[test]
    fn consolidates_published_variant_exponents() {
        let b = [with_alpha(1.00, 0.23), with_alpha(0.75, 0.09), with_alpha(1.20, 0.17)];
        let c = consolidate_exponent(&b).unwrap();
        assert!((c.alpha_hat - 0.98333).abs() < 1e-4);
        // population variance 0.033889, (mean sigma)^2 = 0.026678
        assert!((c.sigma - 0.246103).abs() < 1e-4, "{}", c.sigma);

        let mut e: Vec<PowerLawParams> = [(-0.85, 0.32), (-1.31, 0.21), (-1.68, 0.47)]
            .iter()
            .map(|&(a, s)| with_alpha(a, s))
            .collect();
        for p in &mut e {
            p.target = LawTarget::EtaCrit;
        }
        let c = consolidate_exponent(&e).unwrap();
        assert!((c.alpha_hat + 1.28).abs() < 1e-12);
        assert!((c.sigma - 0.475797).abs() < 1e-4, "{}", c.sigma);
    }

    #[test]
    fn identical_inputs_consolidate_to_themselves() {
        let c = consolidate_exponent(&[with_alpha(0.7, 0.1), with_alpha(0.7, 0.1), with_alpha(0.7, 0.1)]).unwrap();
        assert!((c.alpha_hat - 0.7).abs() < 1e-15);
        assert!((c.sigma - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mismatched_targets_rejected() {
        let mut odd = with_alpha(1.0, 0.1);
        odd.target = LawTarget::EtaCrit;
        assert!(consolidate_exponent(&[with_alpha(1.0, 0.1), with_alpha(1.0, 0.1), odd]).is_err());
    }

    proptest! {
        #[test]
        fn consolidation_permutation_invariant(
            a in proptest::collection::vec((-3.0f64..3.0, 0.0f64..1.0), 3),
            perm in 0usize..6,
        ) {
            let order = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
            let base: Vec<PowerLawParams> = a.iter().map(|&(x, s)| with_alpha(x, s)).collect();
            let shuffled: Vec<PowerLawParams> = order.iter().map(|&i| base[i].clone()).collect();
            let p = consolidate_exponent(&base).unwrap();
            let q = consolidate_exponent(&shuffled).unwrap();
            prop_assert_eq!(p.alpha_hat.to_bits(), q.alpha_hat.to_bits());
            prop_assert_eq!(p.sigma.to_bits(), q.sigma.to_bits());
        }

        #[test]
        fn noiseless_round_trip(a in 1e-6f64..1e-3, alpha in 0.3f64..1.5, b in 1e4f64..1e6) {
            let law = PowerLawParams::exact(LawTarget::BCrit, a, alpha, b);
            let pts = noiseless(&law);
            let fit = fit_powerlaw(&pts, LawTarget::BCrit, &Default::default()).unwrap();
            for p in &pts {
                prop_assert!(rel(fit.eval(p.tokens), p.value) < 1e-6);
            }
        }
    }
}
