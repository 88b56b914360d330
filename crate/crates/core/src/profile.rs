//! Loss profiles L(η) at fixed (B, T, model), their optima, learning-rate
//! sensitivity curves and best-loss-per-batch tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::run_store::RunSet;

/// Selects one profile. With `seed = None`, losses of records that share a
/// learning rate across seeds are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProfileContext {
    pub batch_size: u64,
    pub tokens: u64,
    pub d_model: u32,
    pub d_model_base: u32,
    pub seed: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub lr: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossProfile {
    context: ProfileContext,
    points: Vec<ProfilePoint>,
}

impl LossProfile {
    /// Requires at least two points with strictly increasing, positive lr.
    pub fn new(context: ProfileContext, points: Vec<ProfilePoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::insufficient(format!(
                "profile needs at least 2 distinct learning rates, got {}",
                points.len()
            )));
        }
        for w in points.windows(2) {
            if !(w[0].lr < w[1].lr) {
                return Err(Error::invalid("profile learning rates must be strictly increasing"));
            }
        }
        if points.iter().any(|p| !(p.lr > 0.0) || !(p.val_loss > 0.0)) {
            return Err(Error::invalid("profile values must be positive"));
        }
        Ok(Self { context, points })
    }

    pub fn context(&self) -> &ProfileContext {
        &self.context
    }

    pub fn points(&self) -> &[ProfilePoint] {
        &self.points
    }
}

/// How η* is read off a profile.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimumMethod {
    /// The grid point with the lowest loss.
    #[default]
    GridArgmin,
    /// Vertex of the parabola in log2 η through the argmin and its two
    /// neighbours. Falls back to the grid argmin at the profile edges or
    /// when the three points are not convex.
    LogParabola,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimumEstimate {
    pub eta_star: f64,
    /// Lowest observed loss on the profile.
    pub loss_min: f64,
    /// log2 distance from the argmin to its nearest grid neighbour.
    pub grid_resolution: f64,
}

/// Collects the profile selected by `context` from a run set.
pub fn build_profile(rs: &RunSet, context: ProfileContext) -> Result<LossProfile> {
    let mut by_lr: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in rs.records() {
        if r.batch_size != context.batch_size
            || r.tokens != context.tokens
            || r.d_model != context.d_model
            || r.d_model_base != context.d_model_base
            || context.seed.is_some_and(|s| s != r.seed)
        {
            continue;
        }
        // Positive f64 bit patterns sort like the values.
        let e = by_lr.entry(r.lr.to_bits()).or_insert((r.lr, 0.0, 0));
        e.1 += r.val_loss;
        e.2 += 1;
    }
    let points = by_lr
        .into_values()
        .map(|(lr, sum, n)| ProfilePoint {
            lr,
            val_loss: sum / n as f64,
        })
        .collect();
    LossProfile::new(context, points)
}

fn argmin(points: &[ProfilePoint]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if p.val_loss < points[best].val_loss {
            best = i;
        }
    }
    best
}

/// Optimal learning rate of a profile. Exact ties go to the smaller lr.
pub fn find_optimum(p: &LossProfile, method: OptimumMethod) -> OptimumEstimate {
    let pts = p.points();
    let i = argmin(pts);
    let log2 = |k: usize| pts[k].lr.log2();
    let left = (i > 0).then(|| log2(i) - log2(i - 1));
    let right = (i + 1 < pts.len()).then(|| log2(i + 1) - log2(i));
    let grid_resolution = match (left, right) {
        (Some(l), Some(r)) => l.min(r),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => unreachable!("profiles have at least two points"),
    };
    let mut eta_star = pts[i].lr;
    if method == OptimumMethod::LogParabola && i > 0 && i + 1 < pts.len() {
        if let Some(v) = parabola_vertex(
            (log2(i - 1), pts[i - 1].val_loss),
            (log2(i), pts[i].val_loss),
            (log2(i + 1), pts[i + 1].val_loss),
        ) {
            eta_star = v.exp2();
        }
    }
    OptimumEstimate {
        eta_star,
        loss_min: pts[i].val_loss,
        grid_resolution,
    }
}

/// Abscissa of the vertex of the parabola through three points, if convex.
fn parabola_vertex((x0, y0): (f64, f64), (x1, y1): (f64, f64), (x2, y2): (f64, f64)) -> Option<f64> {
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let curvature = (d12 - d01) / (x2 - x0);
    if !(curvature > 0.0) {
        return None;
    }
    // y = y0 + d01 (x - x0) + c (x - x0)(x - x1); dy/dx = 0 at the vertex.
    let v = 0.5 * (x0 + x1) - d01 / (2.0 * curvature);
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub eta_ratio: f64,
    pub lr: f64,
    pub delta_loss: f64,
}

/// L(η) − L_min keyed both by η/η* and by raw η.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub eta_star: f64,
    pub loss_min: f64,
    pub points: Vec<SensitivityPoint>,
}

impl SensitivityCurve {
    pub fn normalized(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().map(|p| (p.eta_ratio, p.delta_loss))
    }

    pub fn raw(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().map(|p| (p.lr, p.delta_loss))
    }
}

pub fn sensitivity_curve(p: &LossProfile) -> SensitivityCurve {
    let opt = find_optimum(p, OptimumMethod::GridArgmin);
    let points = p
        .points()
        .iter()
        .map(|q| SensitivityPoint {
            eta_ratio: q.lr / opt.eta_star,
            lr: q.lr,
            delta_loss: q.val_loss - opt.loss_min,
        })
        .collect();
    SensitivityCurve {
        eta_star: opt.eta_star,
        loss_min: opt.loss_min,
        points,
    }
}

/// Identifies a single model configuration of a μP family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelKey {
    pub d_model: u32,
    pub d_model_base: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchBest {
    pub loss_min: f64,
    pub eta_star: f64,
}

/// For each batch size at budget `tokens`, the best loss over the lr grid
/// (seed-averaged). Batch sizes without a valid profile are left out.
pub fn best_loss_per_batch(rs: &RunSet, model: ModelKey, tokens: u64) -> Result<BTreeMap<u64, BatchBest>> {
    let batches = rs.distinct(|r| r.batch_size);
    let mut table = BTreeMap::new();
    for b in batches {
        let ctx = ProfileContext {
            batch_size: b,
            tokens,
            d_model: model.d_model,
            d_model_base: model.d_model_base,
            seed: None,
        };
        if let Ok(profile) = build_profile(rs, ctx) {
            let opt = find_optimum(&profile, OptimumMethod::GridArgmin);
            table.insert(
                b,
                BatchBest {
                    loss_min: opt.loss_min,
                    eta_star: opt.eta_star,
                },
            );
        }
    }
    if table.is_empty() {
        return Err(Error::insufficient(format!(
            "no batch size has a valid profile at T = {tokens} for d_model = {}, base = {}",
            model.d_model, model.d_model_base
        )));
    }
    Ok(table)
}

/// Batch size with the lowest best loss; ties go to the smaller batch.
pub fn optimal_batch(table: &BTreeMap<u64, BatchBest>) -> Option<(u64, f64)> {
    let mut best: Option<(u64, f64)> = None;
    for (&b, row) in table {
        if best.is_none_or(|(_, l)| row.loss_min < l) {
            best = Some((b, row.loss_min));
        }
    }
    best
}
