//! Damped Gauss–Newton (Levenberg–Marquardt) solver for small dense
//! nonlinear least-squares problems, plus the covariance estimate used by
//! every fit in the crate.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Tolerance on the scaled gradient: max_j |J_jᵀ r| / (‖J_j‖ ‖r‖).
    /// The iteration also counts as converged when no damped step can
    /// reduce the cost any further.
    pub gtol: f64,
    /// Relative reduction of ‖r‖² below which the iteration stops.
    pub ftol: f64,
    /// Relative step length below which the iteration stops.
    pub xtol: f64,
    pub lambda_init: f64,
    pub lambda_factor: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gtol: 1e-12,
            ftol: 1e-15,
            xtol: 1e-15,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LmOutcome {
    pub fn residual_norm(&self) -> f64 {
        self.residuals.norm()
    }
}

fn scaled_gradient(j: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    let rn = r.norm();
    if rn == 0.0 {
        return 0.0;
    }
    let g = j.transpose() * r;
    let mut worst: f64 = 0.0;
    for (k, gk) in g.iter().enumerate() {
        let cn = j.column(k).norm();
        if cn > 0.0 {
            worst = worst.max(gk.abs() / (cn * rn));
        }
    }
    worst
}

/// Minimizes ‖r(x)‖² from `x0`. `eval` returns the residual vector and its
/// Jacobian, or `None` where the model is undefined (the step is rejected).
pub fn levenberg_marquardt<F>(x0: DVector<f64>, mut eval: F, cfg: &LmConfig) -> Option<LmOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)>,
{
    let mut x = x0;
    let (mut r, mut j) = eval(&x)?;
    let mut cost = r.norm_squared();
    let mut lambda = cfg.lambda_init;
    let mut converged = false;
    let mut iterations = 0;
    let n = x.len();

    while iterations < cfg.max_iterations {
        if scaled_gradient(&j, &r) <= cfg.gtol {
            converged = true;
            break;
        }
        iterations += 1;
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * &r;
        let diag: Vec<f64> = (0..n).map(|k| a[(k, k)].max(f64::MIN_POSITIVE)).collect();

        let mut accepted = false;
        while lambda < 1e32 {
            let m = j.nrows();
            let mut aug = DMatrix::<f64>::zeros(m + n, n);
            aug.view_mut((0, 0), (m, n)).copy_from(&j);
            let mut rhs = DVector::<f64>::zeros(m + n);
            rhs.rows_mut(0, m).copy_from(&(-&r));
            for k in 0..n {
                aug[(m + k, k)] = (lambda * diag[k]).sqrt();
            }
            let step = aug.svd(true, true).solve(&rhs, 0.0).ok()?;
            let x_new = &x + &step;
            let trial = eval(&x_new).filter(|(rn, _)| rn.iter().all(|v| v.is_finite()));
            if let Some((r_new, j_new)) = trial {
                let cost_new = r_new.norm_squared();
                if cost_new < cost {
                    let predicted = -(2.0 * step.dot(&g) + step.dot(&(&a * &step)));
                    let actual = cost - cost_new;
                    let small_f = actual <= cfg.ftol * cost && predicted <= cfg.ftol * cost;
                    let small_x = step.norm() <= cfg.xtol * (x.norm() + cfg.xtol);
                    x = x_new;
                    r = r_new;
                    j = j_new;
                    cost = cost_new;
                    lambda = (lambda / cfg.lambda_factor).max(1e-300);
                    accepted = true;
                    if small_f || small_x || cost == 0.0 {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= cfg.lambda_factor;
        }
        if converged {
            break;
        }
        if !accepted {
            // No damped step lowers the cost: the remaining gradient is
            // rounding noise and x is stationary to working precision.
            converged = true;
            break;
        }
    }

    Some(LmOutcome {
        params: x,
        residuals: r,
        jacobian: j,
        iterations,
        converged,
    })
}

/// Parameter covariance (JᵀJ)⁻¹ · rss/(n − p) for a whitened Jacobian.
///
/// Columns are equilibrated before the inversion. Returns `None` when the
/// Jacobian is rank deficient or there are no degrees of freedom.
pub fn scaled_covariance(j: &DMatrix<f64>, rss: f64) -> Option<DMatrix<f64>> {
    let (m, p) = j.shape();
    if m <= p {
        return None;
    }
    let scales: Vec<f64> = (0..p).map(|k| j.column(k).norm()).collect();
    if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return None;
    }
    let mut js = j.clone();
    for (k, s) in scales.iter().enumerate() {
        js.column_mut(k).scale_mut(1.0 / s);
    }
    let svd = js.svd(false, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    if sv.iter().any(|s| *s <= smax * f64::EPSILON * m.max(p) as f64) {
        return None;
    }
    let vt = svd.v_t.as_ref()?;
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            let mut acc = 0.0;
            for k in 0..p {
                acc += vt[(k, a)] * vt[(k, b)] / (sv[k] * sv[k]);
            }
            cov[(a, b)] = acc / (scales[a] * scales[b]);
        }
    }
    Some(cov * (rss / (m - p) as f64))
}

/// Square roots of the covariance diagonal; `+inf` where unidentified.
pub fn sigmas(cov: Option<&DMatrix<f64>>, p: usize) -> Vec<f64> {
    match cov {
        Some(c) => (0..p).map(|k| c[(k, k)].max(0.0).sqrt()).collect(),
        None => vec![f64::INFINITY; p],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_rosenbrock_as_least_squares() {
        let out = levenberg_marquardt(
            DVector::from_vec(vec![-1.2, 1.0]),
            |x| {
                let r = DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
                let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
                Some((r, j))
            },
            &LmConfig::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.params[0] - 1.0).abs() < 1e-10);
        assert!((out.params[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn covariance_of_straight_line_matches_closed_form() {
        // y = a + b x with unit weights; cov = s² (XᵀX)⁻¹
        let xs: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ys: [f64; 5] = [0.1, 0.9, 2.2, 2.8, 4.1];
        let j = DMatrix::from_fn(5, 2, |i, k| if k == 0 { 1.0 } else { xs[i] });
        let xtx = j.transpose() * &j;
        let beta = xtx.clone().try_inverse().unwrap() * j.transpose() * DVector::from_row_slice(&ys);
        let rss: f64 = (0..5).map(|i| (ys[i] - beta[0] - beta[1] * xs[i]).powi(2)).sum();
        let cov = scaled_covariance(&j, rss).unwrap();
        let want = xtx.try_inverse().unwrap() * (rss / 3.0);
        for k in 0..4 {
            assert!((cov[k] - want[k]).abs() <= 1e-12 * want[k].abs().max(1e-300));
        }
    }

    #[test]
    fn rank_deficient_covariance_is_none() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(scaled_covariance(&j, 1.0).is_none());
        let zero_col = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        assert!(scaled_covariance(&zero_col, 1.0).is_none());
        assert_eq!(sigmas(None, 2), vec![f64::INFINITY; 2]);
    }
}
