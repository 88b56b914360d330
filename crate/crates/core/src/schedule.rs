//! Warmup-stable(-decay) learning-rate schedules over token time.
//!
//! Schedules are continuous functions of the number of tokens seen; a step
//! schedule for a given batch size samples them at step boundaries, so the
//! warmup length in tokens does not depend on the batch size.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::fmt_sig17;

/// Default absolute warmup length in tokens.
pub const DEFAULT_WARMUP_TOKENS: u64 = 1 << 19;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WarmupMode {
    Absolute { tokens: u64 },
    /// Warmup as a fraction of the total horizon, rounded to whole tokens.
    Fraction { f: f64 },
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecayKind {
    None,
    LinearToZero,
    CosineToFraction { floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RawSpec {
    eta_max: f64,
    total_tokens: u64,
    warmup_mode: WarmupMode,
    #[serde(default)]
    warmup_tokens: Option<u64>,
    #[serde(default)]
    decay_tokens: u64,
    decay_kind: DecayKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct ScheduleSpec {
    eta_max: f64,
    total_tokens: u64,
    warmup_mode: WarmupMode,
    warmup_tokens: u64,
    decay_tokens: u64,
    decay_kind: DecayKind,
}

impl TryFrom<RawSpec> for ScheduleSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let spec = ScheduleSpec::new(raw.eta_max, raw.total_tokens, raw.warmup_mode, raw.decay_tokens, raw.decay_kind)?;
        if let Some(w) = raw.warmup_tokens {
            if w != spec.warmup_tokens {
                return Err(Error::invalid(format!(
                    "warmup_tokens {w} disagrees with warmup mode (expected {})",
                    spec.warmup_tokens
                )));
            }
        }
        Ok(spec)
    }
}

impl ScheduleSpec {
    pub fn new(
        eta_max: f64,
        total_tokens: u64,
        warmup_mode: WarmupMode,
        decay_tokens: u64,
        decay_kind: DecayKind,
    ) -> Result<Self> {
        if !(eta_max > 0.0 && eta_max.is_finite()) {
            return Err(Error::invalid(format!("eta_max must be positive, got {eta_max}")));
        }
        if total_tokens == 0 {
            return Err(Error::invalid("total_tokens must be positive"));
        }
        let warmup_tokens = match warmup_mode {
            WarmupMode::Absolute { tokens } => tokens,
            WarmupMode::Fraction { f } => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::invalid(format!("warmup fraction must be in (0, 1], got {f}")));
                }
                (f * total_tokens as f64).round() as u64
            }
            WarmupMode::Disabled => 0,
        };
        match decay_kind {
            DecayKind::None if decay_tokens > 0 => {
                return Err(Error::invalid("decay_tokens > 0 requires a decay kind"));
            }
            DecayKind::CosineToFraction { floor } if !(0.0..1.0).contains(&floor) => {
                return Err(Error::invalid(format!("cosine floor must be in [0, 1), got {floor}")));
            }
            _ => {}
        }
        if warmup_tokens.checked_add(decay_tokens).is_none_or(|s| s > total_tokens) {
            return Err(Error::invalid(format!(
                "warmup ({warmup_tokens}) + decay ({decay_tokens}) exceeds the horizon ({total_tokens})"
            )));
        }
        Ok(Self {
            eta_max,
            total_tokens,
            warmup_mode,
            warmup_tokens,
            decay_tokens,
            decay_kind,
        })
    }

    /// Warmup followed by a constant phase.
    pub fn ws(eta_max: f64, total_tokens: u64, warmup_tokens: u64) -> Result<Self> {
        Self::new(
            eta_max,
            total_tokens,
            WarmupMode::Absolute { tokens: warmup_tokens },
            0,
            DecayKind::None,
        )
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn warmup_mode(&self) -> WarmupMode {
        self.warmup_mode
    }

    pub fn warmup_tokens(&self) -> u64 {
        self.warmup_tokens
    }

    pub fn decay_tokens(&self) -> u64 {
        self.decay_tokens
    }

    pub fn decay_kind(&self) -> DecayKind {
        self.decay_kind
    }

    /// First token of the decay phase.
    pub fn decay_start(&self) -> u64 {
        self.total_tokens - self.decay_tokens
    }

    fn phase_at(&self, t: f64) -> Phase {
        if t < self.warmup_tokens as f64 {
            Phase::Warmup
        } else if self.decay_tokens == 0 || t < self.decay_start() as f64 {
            Phase::Stable
        } else {
            Phase::Decay
        }
    }

    fn eval_phase(&self, phase: Phase, t: f64) -> f64 {
        match phase {
            Phase::Warmup => t / self.warmup_tokens as f64 * self.eta_max,
            Phase::Stable => self.eta_max,
            Phase::Decay => {
                let p = ((t - self.decay_start() as f64) / self.decay_tokens as f64).min(1.0);
                match self.decay_kind {
                    DecayKind::None => self.eta_max,
                    DecayKind::LinearToZero => (1.0 - p) * self.eta_max,
                    DecayKind::CosineToFraction { floor } => {
                        self.eta_max * (floor + (1.0 - floor) * 0.5 * (1.0 + (PI * p).cos()))
                    }
                }
            }
        }
    }

    /// Learning rate at continuous token time `t`, without range checks.
    pub fn eta_at(&self, t: f64) -> f64 {
        self.eval_phase(self.phase_at(t), t)
    }

    /// Limit from the left at `t > 0`: the formula of the phase active just
    /// before `t`, evaluated at `t`.
    pub fn eta_left_limit(&self, t: f64) -> f64 {
        let phase = if self.warmup_tokens > 0 && t <= self.warmup_tokens as f64 {
            Phase::Warmup
        } else if self.decay_tokens == 0 || t <= self.decay_start() as f64 {
            Phase::Stable
        } else {
            Phase::Decay
        };
        self.eval_phase(phase, t)
    }

    /// Token positions where the active phase changes, inside (0, T).
    pub fn phase_boundaries(&self) -> Vec<u64> {
        let mut b = Vec::new();
        if self.warmup_tokens > 0 && self.warmup_tokens < self.total_tokens {
            b.push(self.warmup_tokens);
        }
        if self.decay_tokens > 0 && self.decay_start() != self.warmup_tokens {
            b.push(self.decay_start());
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Warmup,
    Stable,
    Decay,
}

pub fn eval_schedule(spec: &ScheduleSpec, t: f64) -> Result<f64> {
    if !(0.0..=spec.total_tokens as f64).contains(&t) {
        return Err(Error::invalid(format!(
            "t = {t} outside the schedule horizon [0, {}]",
            spec.total_tokens
        )));
    }
    Ok(spec.eta_at(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    /// 1-based optimizer step.
    pub step: u64,
    /// Tokens seen after this step.
    pub tokens: u64,
    pub lr: f64,
}

/// One entry per optimizer step k = 1..=ceil(T/B), evaluated at
/// min(k·B, T) tokens.
pub fn emit_step_schedule(spec: &ScheduleSpec, batch_size: u64) -> Result<Vec<ScheduleStep>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let total = spec.total_tokens;
    let steps = total.div_ceil(batch_size);
    Ok((1..=steps)
        .map(|k| {
            let tokens = k.saturating_mul(batch_size).min(total);
            ScheduleStep {
                step: k,
                tokens,
                lr: spec.eta_at(tokens as f64),
            }
        })
        .collect())
}

pub fn write_step_csv<W: Write>(steps: &[ScheduleStep], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "tokens", "lr"])?;
    for s in steps {
        w.write_record([s.step.to_string(), s.tokens.to_string(), fmt_sig17(s.lr)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T: u64 = 1 << 30;
    const W: u64 = 1 << 19;

    fn eta() -> f64 {
        (-9f64).exp2()
    }

    #[test]
    fn warmup_is_linear_in_tokens() {
        let s = ScheduleSpec::ws(eta(), T, W).unwrap();
        assert_eq!(eval_schedule(&s, (1u64 << 18) as f64).unwrap(), (-10f64).exp2());
        assert_eq!(eval_schedule(&s, W as f64).unwrap(), eta());
        assert_eq!(eval_schedule(&s, 0.0).unwrap(), 0.0);
        assert!(eval_schedule(&s, T as f64 + 1.0).is_err());
        assert!(eval_schedule(&s, -1.0).is_err());
    }

    #[test]
    fn decay_endpoints() {
        let d = 1u64 << 28;
        let lin = ScheduleSpec::new(eta(), T, WarmupMode::Absolute { tokens: W }, d, DecayKind::LinearToZero).unwrap();
        assert_eq!(eval_schedule(&lin, T as f64).unwrap(), 0.0);
        let cos = ScheduleSpec::new(
            eta(),
            T,
            WarmupMode::Absolute { tokens: W },
            d,
            DecayKind::CosineToFraction { floor: 0.1 },
        )
        .unwrap();
        assert!((eval_schedule(&cos, T as f64).unwrap() - 0.1 * eta()).abs() < 1e-18);
        assert_eq!(eval_schedule(&cos, (T - d) as f64).unwrap(), eta());
    }

    #[test]
    fn step_schedule_warmup_spans_eight_steps_at_small_batch() {
        let s = ScheduleSpec::ws(eta(), T, W).unwrap();
        let steps = emit_step_schedule(&s, 1 << 16).unwrap();
        assert_eq!(steps.len() as u64, T >> 16);
        assert!(steps[6].lr < eta());
        assert_eq!(steps[7].step, 8);
        assert_eq!(steps[7].lr, eta());
    }

    #[test]
    fn large_batch_starts_at_peak() {
        let s = ScheduleSpec::ws(eta(), T, W).unwrap();
        let steps = emit_step_schedule(&s, 1 << 20).unwrap();
        assert_eq!(steps[0].lr, eta());
    }

    #[test]
    fn last_step_is_clamped_to_horizon() {
        let s = ScheduleSpec::new(1.0, 10, WarmupMode::Disabled, 10, DecayKind::LinearToZero).unwrap();
        let steps = emit_step_schedule(&s, 3).unwrap();
        assert_eq!(steps.len(), 4);
        assert_eq!(steps[3].tokens, 10);
        assert_eq!(steps[3].lr, 0.0);
        assert!(emit_step_schedule(&s, 0).is_err());
    }

    #[test]
    fn fractional_warmup_rounds() {
        let s = ScheduleSpec::new(eta(), T, WarmupMode::Fraction { f: 1.0 / 64.0 }, 0, DecayKind::None).unwrap();
        assert_eq!(s.warmup_tokens(), 1 << 24);
        let odd = ScheduleSpec::new(1.0, 1000, WarmupMode::Fraction { f: 0.0015 }, 0, DecayKind::None).unwrap();
        assert_eq!(odd.warmup_tokens(), 2);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ScheduleSpec::ws(0.0, T, W).is_err());
        assert!(ScheduleSpec::ws(1.0, 10, 11).is_err());
        assert!(ScheduleSpec::new(1.0, 10, WarmupMode::Absolute { tokens: 5 }, 6, DecayKind::LinearToZero).is_err());
        assert!(ScheduleSpec::new(1.0, 10, WarmupMode::Disabled, 3, DecayKind::None).is_err());
        assert!(ScheduleSpec::new(1.0, 10, WarmupMode::Disabled, 3, DecayKind::CosineToFraction { floor: 1.0 }).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let s = ScheduleSpec::new(
            eta(),
            T,
            WarmupMode::Fraction { f: 1.0 / 64.0 },
            1 << 28,
            DecayKind::CosineToFraction { floor: 0.1 },
        )
        .unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: ScheduleSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad = text.replace("\"warmup_tokens\":16777216", "\"warmup_tokens\":5");
        assert!(serde_json::from_str::<ScheduleSpec>(&bad).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = ScheduleSpec::new(1.0, 4, WarmupMode::Absolute { tokens: 2 }, 0, DecayKind::None).unwrap();
        let mut out = Vec::new();
        write_step_csv(&emit_step_schedule(&s, 2).unwrap(), &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "step,tokens,lr\n1,2,1.0000000000000000\n2,4,1.0000000000000000\n"
        );
    }

    #[test]
    fn one_sided_limits_agree_at_boundaries() {
        for kind in [DecayKind::LinearToZero, DecayKind::CosineToFraction { floor: 0.1 }] {
            let s = ScheduleSpec::new(eta(), T, WarmupMode::Absolute { tokens: W }, 1 << 28, kind).unwrap();
            assert_eq!(s.phase_boundaries(), vec![W, T - (1 << 28)]);
            for b in s.phase_boundaries() {
                assert_eq!(s.eta_left_limit(b as f64), s.eta_at(b as f64));
            }
        }
    }

    proptest! {
        #[test]
        fn bounded_and_flat_in_stable_phase(
            w in 0u64..1000, d in 0u64..1000, extra in 1u64..1000, floor in 0.0f64..0.99,
            kind in 0u8..3, u in 0.0f64..1.0,
        ) {
            let total = w + d + extra;
            let decay_kind = match kind {
                0 => DecayKind::None,
                1 => DecayKind::LinearToZero,
                _ => DecayKind::CosineToFraction { floor },
            };
            let d = if kind == 0 { 0 } else { d };
            let mode = if w == 0 { WarmupMode::Disabled } else { WarmupMode::Absolute { tokens: w } };
            let s = ScheduleSpec::new(2.0, total, mode, d, decay_kind).unwrap();
            let t = u * total as f64;
            let v = eval_schedule(&s, t).unwrap();
            prop_assert!((0.0..=2.0).contains(&v));
            if t >= w as f64 && t < (total - d) as f64 {
                prop_assert_eq!(v, 2.0);
            }
            let ws = ScheduleSpec::new(2.0, total, mode, 0, DecayKind::None).unwrap();
            if t < (total - d) as f64 {
                prop_assert_eq!(v, eval_schedule(&ws, t).unwrap());
            }
        }
    }
}
