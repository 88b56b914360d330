//! Synthetic loss surfaces with known ground-truth laws.
//!
//! The loss is quadratic in log2 η around the surge-law optimum and in
//! log2 B around an independent B*(T) law:
//!
//! ```text
//! L = c0 + c1·T^c2 + k_η·(log2 η − log2 η*(T, B))² + k_B·(log2 B − log2 B*(T))²
//! ```
//!
//! Noise for grid point `i` comes from a ChaCha8 stream seeded with
//! `splitmix64(seed ^ splitmix64(i))`, so each point is reproducible on its
//! own and generation order does not matter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mup::GridPoint;
use crate::powerlaw::{LawTarget, PowerLawParams};
use crate::run_store::{RunRecord, RunSet};
use crate::surge::surge;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseLossLaw {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl BaseLossLaw {
    pub fn eval(&self, tokens: f64) -> f64 {
        self.c0 + self.c1 * tokens.powf(self.c2)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Loss multiplied by exp(ε).
    #[default]
    LogNormal,
    /// ε added to the loss.
    Additive,
}

/// Missing JSON fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSpec {
    pub eta_crit_law: PowerLawParams,
    pub b_crit_law: PowerLawParams,
    pub b_star_law: PowerLawParams,
    pub base_loss_law: BaseLossLaw,
    pub curvature_eta: f64,
    pub curvature_b: f64,
    pub noise_sigma: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            eta_crit_law: PowerLawParams::exact(LawTarget::EtaCrit, 2.0e9, -1.3, 3.1e-3),
            b_crit_law: PowerLawParams::exact(LawTarget::BCrit, 8.0e-5, 1.0, 3.0e5),
            // 2^18 at T = 2^30, growing as √T
            b_star_law: PowerLawParams::exact(LawTarget::BStar, 8.0, 0.5, 0.0),
            base_loss_law: BaseLossLaw {
                c0: 2.6,
                c1: 400.0,
                c2: -0.3,
            },
            curvature_eta: 0.5,
            curvature_b: 0.5,
            noise_sigma: 0.0,
            noise_kind: NoiseKind::LogNormal,
            seed: 0,
        }
    }
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.curvature_eta > 0.0) {
            return Err(Error::invalid("curvature_eta must be positive"));
        }
        if !(self.curvature_b >= 0.0) {
            return Err(Error::invalid("curvature_b must be nonnegative"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        Ok(())
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the noise stream of grid point `index`.
pub fn point_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

fn law_value(law: &PowerLawParams, name: &str, t: f64) -> Result<f64> {
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

pub fn ground_truth_eta_star(spec: &OracleSpec, tokens: f64, batch_size: f64) -> Result<f64> {
    if !(tokens > 0.0 && batch_size > 0.0) {
        return Err(Error::invalid("T and B must be positive"));
    }
    let eta_crit = law_value(&spec.eta_crit_law, "eta_crit", tokens)?;
    let b_crit = law_value(&spec.b_crit_law, "b_crit", tokens)?;
    Ok(surge(eta_crit, b_crit, batch_size))
}

pub fn ground_truth_b_star(spec: &OracleSpec, tokens: f64) -> Result<f64> {
    law_value(&spec.b_star_law, "b_star", tokens)
}

/// Deterministic (noise-free) loss at one grid point.
pub fn clean_loss(spec: &OracleSpec, p: &GridPoint) -> Result<f64> {
    let t = p.tokens as f64;
    let b = p.batch_size as f64;
    let eta_star = ground_truth_eta_star(spec, t, b)?;
    let b_star = ground_truth_b_star(spec, t)?;
    let base = spec.base_loss_law.eval(t);
    let de = p.lr.log2() - eta_star.log2();
    let db = b.log2() - b_star.log2();
    Ok(base + spec.curvature_eta * de * de + spec.curvature_b * db * db)
}

pub fn gen_surface(spec: &OracleSpec, grid: &[GridPoint]) -> Result<RunSet> {
    spec.validate()?;
    if grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut records = Vec::with_capacity(grid.len());
    for (i, p) in grid.iter().enumerate() {
        let clean = clean_loss(spec, p)?;
        let val_loss = if spec.noise_sigma == 0.0 {
            clean
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(point_seed(spec.seed, i as u64));
            let eps: f64 = StandardNormal.sample(&mut rng);
            match spec.noise_kind {
                NoiseKind::LogNormal => clean * (spec.noise_sigma * eps).exp(),
                NoiseKind::Additive => clean + spec.noise_sigma * eps,
            }
        };
        if !(val_loss > 0.0) {
            return Err(Error::invalid(format!(
                "oracle produced a non-positive loss {val_loss} at grid point {i}"
            )));
        }
        records.push(RunRecord {
            run_id: p.run_id(),
            d_model: p.d_model,
            d_model_base: p.d_model_base,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: p.seed,
            tokens: p.tokens,
            val_loss,
        });
    }
    RunSet::new(records, format!("synth:seed={}", spec.seed))
}
