//! Scalar evaluators for critical-batch-size and gradient-noise-scale
//! formulas. Matrix quantities are supplied as precomputed aggregates.

use crate::error::{Error, Result};
use crate::surge::surge;

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// B_crit = E_min / S_min.
pub fn b_crit_ratio(e_min: f64, s_min: f64) -> Result<f64> {
    positive("E_min", e_min)?;
    positive("S_min", s_min)?;
    Ok(e_min / s_min)
}

/// tr(HΣ) / GᵀHG.
pub fn b_noise_curv(tr_h_sigma: f64, gt_h_g: f64) -> Result<f64> {
    if gt_h_g == 0.0 {
        return Err(Error::invalid("GᵀHG is zero"));
    }
    positive("tr(HΣ)", tr_h_sigma)?;
    positive("GᵀHG", gt_h_g)?;
    Ok(tr_h_sigma / gt_h_g)
}

/// tr(Σ) / |G|², the isotropic-Hessian simplification.
pub fn b_simple_curv(tr_sigma: f64, g_sq: f64) -> Result<f64> {
    if g_sq == 0.0 {
        return Err(Error::invalid("|G|² is zero"));
    }
    positive("tr(Σ)", tr_sigma)?;
    positive("|G|²", g_sq)?;
    Ok(tr_sigma / g_sq)
}

/// B0 / L^(1/α_B).
pub fn b_crit_from_loss(b0: f64, alpha_b: f64, loss: f64) -> Result<f64> {
    positive("B0", b0)?;
    positive("L", loss)?;
    if alpha_b == 0.0 || !alpha_b.is_finite() {
        return Err(Error::invalid("alpha_B must be nonzero"));
    }
    Ok(b0 / loss.powf(1.0 / alpha_b))
}

/// η·(T/B − 1).
pub fn b_noise_sde(eta: f64, t_examples: f64, b: f64) -> Result<f64> {
    positive("eta", eta)?;
    positive("T", t_examples)?;
    positive("B", b)?;
    if b > t_examples {
        return Err(Error::invalid(format!("B = {b} exceeds the training set size {t_examples}")));
    }
    Ok(eta * (t_examples / b - 1.0))
}

/// b_noise_sde / |w|², in units of 1/loss.
pub fn b_noise_norm(eta: f64, t_examples: f64, b: f64, w_norm_sq: f64) -> Result<f64> {
    positive("|w|²", w_norm_sq)?;
    Ok(b_noise_sde(eta, t_examples, b)? / w_norm_sq)
}

/// Optimal learning rate with peak value η_crit at B = B_peak.
pub fn eta_star_li(eta_crit: f64, b_peak: f64, b: f64) -> Result<f64> {
    positive("eta_crit", eta_crit)?;
    positive("B_peak", b_peak)?;
    positive("B", b)?;
    Ok(2.0 * surge(eta_crit, b_peak, b))
}
