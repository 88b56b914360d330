//! Extrapolation of the fitted laws to a target horizon and the resulting
//! (η*, B*) recommendation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::powerlaw::{fit_powerlaw, fit_pure_powerlaw, LawPoint, LawTarget, PowerLawFitOptions, PowerLawParams, Weighting};
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SubCritical,
    Critical,
    SuperCritical,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::SubCritical => "sub_critical",
            Regime::Critical => "critical",
            Regime::SuperCritical => "super_critical",
        })
    }
}

impl Regime {
    /// Limiting scaling rule for η* in this regime.
    pub fn rule(self) -> &'static str {
        match self {
            Regime::SubCritical => "eta* ~ sqrt(B)",
            Regime::Critical => "eta* ~ eta_crit",
            Regime::SuperCritical => "eta* ~ 1/sqrt(B) (surge)",
        }
    }
}

pub const DEFAULT_REGIME_TOLERANCE_LOG2: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeClass {
    pub regime: Regime,
    pub rule: String,
    pub log2_ratio: f64,
}

/// Critical iff |log2(B/B_crit)| ≤ `tolerance_log2`, otherwise sub/super
/// critical by the sign of the log ratio.
pub fn classify_regime(b: f64, b_crit: f64, tolerance_log2: f64) -> RegimeClass {
    let log2_ratio = (b / b_crit).log2();
    let regime = if log2_ratio.abs() <= tolerance_log2 {
        Regime::Critical
    } else if log2_ratio < 0.0 {
        Regime::SubCritical
    } else {
        Regime::SuperCritical
    };
    RegimeClass {
        regime,
        rule: regime.rule().to_string(),
        log2_ratio,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftOptions {
    /// Pin the offset to zero (pure power law).
    pub zero_offset: bool,
    /// Accept a two-point history; the slope is exact and unconstrained.
    pub allow_two_point: bool,
}

impl Default for DriftOptions {
    fn default() -> Self {
        Self {
            zero_offset: true,
            allow_two_point: false,
        }
    }
}

/// Power-law fit of the optimal batch size over the token budget.
pub fn fit_bstar_drift(history: &[(f64, f64)], opts: &DriftOptions) -> Result<PowerLawParams> {
    if opts.zero_offset {
        let min = if opts.allow_two_point { 2 } else { 3 };
        return fit_pure_powerlaw(history, LawTarget::BStar, min);
    }
    let pts: Vec<LawPoint> = history
        .iter()
        .map(|&(t, b)| LawPoint {
            tokens: t,
            value: b,
            sigma: 0.0,
        })
        .collect();
    fit_powerlaw(
        &pts,
        LawTarget::BStar,
        &PowerLawFitOptions {
            weighting: Weighting::Unit,
            ..Default::default()
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnappedBatch {
    pub b_star: f64,
    pub eta_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationProvenance {
    pub b_crit_law: PowerLawParams,
    pub eta_crit_law: PowerLawParams,
    #[serde(default)]
    pub b_star_law: Option<PowerLawParams>,
    /// Where b_star_target came from ("drift_fit" or "user").
    pub b_star_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub t_target: f64,
    pub b_star_target: f64,
    pub b_crit_target: f64,
    pub eta_crit_target: f64,
    pub eta_star_target: f64,
    /// Branch of the case equation: critical only when B* equals B_crit.
    pub regime: Regime,
    /// Band classification with the default tolerance, with its rule label.
    pub classification: RegimeClass,
    #[serde(default)]
    pub snapped: Option<SnappedBatch>,
    pub provenance: RecommendationProvenance,
}

/// η* for batch size `b` given the critical values, by the regime case
/// equation.
pub fn corrected_eta(b: f64, b_crit: f64, eta_crit: f64) -> f64 {
    let (below, above) = branch_values(b, b_crit, eta_crit);
    if b <= b_crit {
        below
    } else {
        above
    }
}

/// Both branches of the case equation evaluated at `b`:
/// (η_crit·√(B/B_crit), η_crit·√(B_crit/B)).
pub fn branch_values(b: f64, b_crit: f64, eta_crit: f64) -> (f64, f64) {
    (eta_crit * (b / b_crit).sqrt(), eta_crit * (b_crit / b).sqrt())
}

fn extrapolated(law: &PowerLawParams, name: &str, t: f64) -> Result<f64> {
    let v = law.eval(t);
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonPositiveExtrapolation {
            law: name.to_string(),
            value: v,
            tokens: t,
        })
    }
}

pub fn recommend(
    b_star_target: f64,
    b_crit_law: &PowerLawParams,
    eta_crit_law: &PowerLawParams,
    t_target: f64,
) -> Result<Recommendation> {
    if !(t_target > 0.0 && t_target.is_finite()) {
        return Err(Error::invalid(format!("target horizon must be positive, got {t_target}")));
    }
    if !(b_star_target > 0.0 && b_star_target.is_finite()) {
        return Err(Error::invalid(format!("B* target must be positive, got {b_star_target}")));
    }
    let b_crit_target = extrapolated(b_crit_law, "b_crit", t_target)?;
    let eta_crit_target = extrapolated(eta_crit_law, "eta_crit", t_target)?;
    let eta_star_target = corrected_eta(b_star_target, b_crit_target, eta_crit_target);
    let regime = match b_star_target.partial_cmp(&b_crit_target) {
        Some(std::cmp::Ordering::Less) => Regime::SubCritical,
        Some(std::cmp::Ordering::Greater) => Regime::SuperCritical,
        _ => Regime::Critical,
    };
    Ok(Recommendation {
        t_target,
        b_star_target,
        b_crit_target,
        eta_crit_target,
        eta_star_target,
        regime,
        classification: classify_regime(b_star_target, b_crit_target, DEFAULT_REGIME_TOLERANCE_LOG2),
        snapped: None,
        provenance: RecommendationProvenance {
            b_crit_law: b_crit_law.clone(),
            eta_crit_law: eta_crit_law.clone(),
            b_star_law: None,
            b_star_source: "user".into(),
        },
    })
}

impl Recommendation {
    pub fn with_b_star_law(mut self, law: PowerLawParams) -> Self {
        self.provenance.b_star_law = Some(law);
        self.provenance.b_star_source = "drift_fit".into();
        self
    }

    /// Snaps B* to the nearest power of two and recomputes η* there.
    pub fn snap_to_grid(mut self) -> Self {
        let b = self.b_star_target.log2().round().exp2();
        self.snapped = Some(SnappedBatch {
            b_star: b,
            eta_star: corrected_eta(b, self.b_crit_target, self.eta_crit_target),
        });
        self
    }

    /// The (B*, η*) pair to use: snapped if requested, raw otherwise.
    pub fn chosen(&self) -> (f64, f64) {
        match &self.snapped {
            Some(s) => (s.b_star, s.eta_star),
            None => (self.b_star_target, self.eta_star_target),
        }
    }

    /// Warmup-stable schedule at the recommended peak rate.
    pub fn schedule(&self, warmup_tokens: u64) -> Result<ScheduleSpec> {
        let total = self.t_target.round();
        if total < 1.0 || total > u64::MAX as f64 {
            return Err(Error::invalid("target horizon does not fit a token count"));
        }
        ScheduleSpec::ws(self.chosen().1, total as u64, warmup_tokens.min(total as u64))
    }

    pub fn summary(&self) -> String {
        let (b, eta) = self.chosen();
        let mut s = format!(
            "target T = {:.6e} tokens\n  B* = {:.6e} tokens{}\n  eta* = {:.6e}\n  B_crit = {:.6e} tokens\n  eta_crit = {:.6e}\n  regime: {} ({})\n  band: {} (log2 B*/B_crit = {:.3})\n",
            self.t_target,
            b,
            if self.snapped.is_some() { " (snapped)" } else { "" },
            eta,
            self.b_crit_target,
            self.eta_crit_target,
            self.regime,
            self.regime.rule(),
            self.classification.regime,
            self.classification.log2_ratio,
        );
        if self.b_star_target < self.b_crit_target {
            s.push_str("  note: B* lies below B_crit at the target horizon\n");
        }
        s
    }
}
