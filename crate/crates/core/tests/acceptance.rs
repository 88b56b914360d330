//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalefit::extrapolate::{branch_values, recommend};
use scalefit::mup::{enumerate_grid, GridAxes};
use scalefit::noise::eta_star_li;
use scalefit::pipeline::{run_pipeline, run_pipeline_csv, PipelineConfig, PipelineReport};
use scalefit::powerlaw::{consolidate_exponent, LawTarget, PowerLawParams};
use scalefit::profile::{best_loss_per_batch, optimal_batch, ModelKey, OptimumMethod};
use scalefit::run_store::{emit_csv, RunSet};
use scalefit::schedule::{emit_step_schedule, eval_schedule, DecayKind, ScheduleSpec, WarmupMode};
use scalefit::surge::eval_surge;
use scalefit::synth::{gen_surface, OracleSpec};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn base_1024_grid() -> GridAxes {
    GridAxes::default().only_base(1024).expect("base 1024 axis")
}

fn oracle_report(spec: &OracleSpec) -> Result<PipelineReport, String> {
    let rs = gen_surface(spec, &enumerate_grid(&base_1024_grid())).map_err(|e| e.to_string())?;
    let config = PipelineConfig {
        method: OptimumMethod::LogParabola,
        ..Default::default()
    };
    run_pipeline(&rs, String::new(), &config).map_err(|e| e.to_string())
}

fn alpha_hat(report: &PipelineReport, target: LawTarget) -> f64 {
    report
        .consolidated
        .iter()
        .find(|c| c.target == target)
        .map(|c| c.alpha_hat)
        .unwrap_or(f64::NAN)
}

fn surge_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sym, mut worst_li, mut worst_peak) = (0f64, 0f64, 0f64);
    let mut peak_is_max = true;
    for _ in 0..1000 {
        let ec = 10f64.powf(rng.gen_range(-6.0..0.0));
        let bc = 10f64.powf(rng.gen_range(2.0..9.0));
        let b = 10f64.powf(rng.gen_range(0.0..11.0));
        let peak = eval_surge(ec, bc, bc).unwrap();
        worst_peak = worst_peak.max(rel(peak, ec / 2.0));
        peak_is_max &= eval_surge(ec, bc, b).unwrap() <= peak;
        peak_is_max &= eval_surge(ec, bc, bc * 1.001).unwrap() < peak && eval_surge(ec, bc, bc / 1.001).unwrap() < peak;
        let v = eval_surge(ec, bc, b).unwrap();
        worst_sym = worst_sym.max(rel(eval_surge(ec, bc, bc * bc / b).unwrap(), v));
        worst_li = worst_li.max(rel(eta_star_li(ec, bc, b).unwrap(), 2.0 * v));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        peak_is_max && worst_peak <= 1e-12 && worst_sym <= 1e-12 && worst_li <= 1e-12 && secs < 1.0,
        format!("peak rel {worst_peak:.1e}, symmetry rel {worst_sym:.1e}, li rel {worst_li:.1e}, {secs:.3}s"),
    )
}

fn limit_regimes() -> Outcome {
    let (ec, bc) = (0.01, 20f64.exp2());
    let lo = bc * (-10f64).exp2();
    let hi = bc * 10f64.exp2();
    let e_lo = rel(eval_surge(ec, bc, lo).unwrap(), ec * (lo / bc).sqrt());
    let e_hi = rel(eval_surge(ec, bc, hi).unwrap(), ec * (bc / hi).sqrt());
    check(
        e_lo <= 1e-3 && e_hi <= 1e-3,
        format!("rel dev {e_lo:.5} (2^-10), {e_hi:.5} (2^10)"),
    )
}

fn noiseless_recovery() -> Outcome {
    let start = Instant::now();
    let report = oracle_report(&OracleSpec::default())?;
    let secs = start.elapsed().as_secs_f64();
    let ab = alpha_hat(&report, LawTarget::BCrit);
    let ae = alpha_hat(&report, LawTarget::EtaCrit);
    let fb = &report.final_laws.b_crit;
    let (ra, rb) = (rel(fb.a, 8.0e-5), rel(fb.b, 3.0e5));
    check(
        (ab - 1.0).abs() <= 1e-3 && (ae + 1.3).abs() <= 1e-2 && ra <= 1e-3 && rb <= 1e-3 && secs < 30.0,
        format!("alpha_B {ab:.6}, alpha_eta {ae:.6}, a_B rel {ra:.1e}, b_B rel {rb:.1e}, {secs:.1}s"),
    )
}

fn noisy_recovery() -> Outcome {
    let mut inside = 0;
    let mut alphas = Vec::new();
    for seed in 0..10u64 {
        let spec = OracleSpec {
            noise_sigma: 0.01,
            seed,
            ..Default::default()
        };
        let a = match oracle_report(&spec) {
            Ok(r) => alpha_hat(&r, LawTarget::BCrit),
            Err(_) => f64::NAN,
        };
        if (0.8..=1.2).contains(&a) {
            inside += 1;
        }
        alphas.push(format!("{a:.3}"));
    }
    check(inside >= 8, format!("{inside}/10 seeds in [0.8, 1.2]: {}", alphas.join(" ")))
}

fn with_alpha(target: LawTarget, alpha: f64, sigma: f64) -> PowerLawParams {
    let mut p = PowerLawParams::exact(target, 1.0, alpha, 0.0);
    p.sigmas.alpha = sigma;
    p
}

fn consolidation() -> Outcome {
    let b: Vec<_> = [(1.00, 0.23), (0.75, 0.09), (1.20, 0.17)]
        .iter()
        .map(|&(a, s)| with_alpha(LawTarget::BCrit, a, s))
        .collect();
    let e: Vec<_> = [(-0.85, 0.32), (-1.31, 0.21), (-1.68, 0.47)]
        .iter()
        .map(|&(a, s)| with_alpha(LawTarget::EtaCrit, a, s))
        .collect();
    let cb = consolidate_exponent(&b).map_err(|e| e.to_string())?;
    let ce = consolidate_exponent(&e).map_err(|e| e.to_string())?;
    let ok = (cb.alpha_hat - 0.98).abs() <= 0.01
        && (cb.sigma - 0.24).abs() <= 0.01
        && (ce.alpha_hat + 1.28).abs() <= 0.01
        && (ce.sigma - 0.48).abs() <= 0.01
        && format!("{:.1}", cb.alpha_hat) == "1.0"
        && format!("{:.1}", cb.sigma) == "0.2"
        && format!("{:.1}", ce.alpha_hat) == "-1.3";
    check(
        ok,
        format!(
            "alpha_B {:.4} +- {:.4}, alpha_eta {:.4} +- {:.4}",
            cb.alpha_hat, cb.sigma, ce.alpha_hat, ce.sigma
        ),
    )
}

fn recommendation_continuity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_branch = 0f64;
    let mut bounded = true;
    for _ in 0..1000 {
        let eta = 10f64.powf(rng.gen_range(-5.0..0.0));
        let bc = 10f64.powf(rng.gen_range(3.0..9.0));
        let (lo, hi) = branch_values(bc, bc, eta);
        worst_branch = worst_branch.max(rel(lo, hi));

        let t = 10f64.powf(rng.gen_range(9.0..13.0));
        let b_law = PowerLawParams::exact(LawTarget::BCrit, rng.gen_range(1e-6..1e-3), rng.gen_range(0.3..1.5), 1e4);
        let e_law = PowerLawParams::exact(LawTarget::EtaCrit, rng.gen_range(1.0..1e10), rng.gen_range(-1.5..-0.1), 1e-3);
        let b_star = 10f64.powf(rng.gen_range(3.0..10.0));
        let r = recommend(b_star, &b_law, &e_law, t).map_err(|e| e.to_string())?;
        bounded &= r.eta_star_target <= r.eta_crit_target;
    }
    check(
        worst_branch <= 1e-12 && bounded,
        format!("branch gap {worst_branch:.1e}, eta* <= eta_crit on all 1000: {bounded}"),
    )
}

fn schedule_contract() -> Outcome {
    const T: u64 = 1 << 30;
    const W: u64 = 1 << 19;
    let eta = (-9f64).exp2();
    let abs = WarmupMode::Absolute { tokens: W };
    let panels = [
        ("warmup+constant", ScheduleSpec::new(eta, T, abs, 0, DecayKind::None)),
        ("warmup+constant+linear", ScheduleSpec::new(eta, T, abs, T / 5, DecayKind::LinearToZero)),
        ("warmup+linear", ScheduleSpec::new(eta, T, abs, T - W, DecayKind::LinearToZero)),
        (
            "warmup+cosine10%",
            ScheduleSpec::new(eta, T, abs, T - W, DecayKind::CosineToFraction { floor: 0.1 }),
        ),
        (
            "fraction1/64+constant",
            ScheduleSpec::new(eta, T, WarmupMode::Fraction { f: 1.0 / 64.0 }, 0, DecayKind::None),
        ),
        ("constant", ScheduleSpec::new(eta, T, WarmupMode::Disabled, 0, DecayKind::None)),
    ];
    let mut worst = 0f64;
    let mut bounded = true;
    let mut limits_agree = true;
    let mut warmup_ok = true;
    const N: u64 = 1_000_000;
    for (name, spec) in &panels {
        let spec = spec.as_ref().map_err(|e| format!("{name}: {e}"))?;
        let boundaries = spec.phase_boundaries();
        for i in 0..N {
            // sample point and its successor one token later
            let t0 = (i * (T - 1)) / (N - 1);
            let t1 = t0 + 1;
            let v0 = eval_schedule(spec, t0 as f64).unwrap();
            let v1 = eval_schedule(spec, t1 as f64).unwrap();
            bounded &= (0.0..=eta).contains(&v0) && (0.0..=eta).contains(&v1);
            if boundaries.iter().any(|&b| b > t0 && b <= t1) {
                continue;
            }
            worst = worst.max((v1 - v0).abs());
        }
        for &b in &boundaries {
            limits_agree &= spec.eta_left_limit(b as f64) == spec.eta_at(b as f64);
        }
        if matches!(spec.warmup_mode(), WarmupMode::Absolute { .. }) {
            warmup_ok &= eval_schedule(spec, W as f64).unwrap() == eta;
            warmup_ok &= eval_schedule(spec, (W - 1) as f64).unwrap() < eta;
            for k in (16..=26).step_by(2) {
                let b = 1u64 << k;
                let steps = emit_step_schedule(spec, b).unwrap();
                if b <= W {
                    let k = (W / b) as usize;
                    warmup_ok &= steps[k - 1].tokens == W && steps[k - 1].lr == eta;
                    warmup_ok &= steps[..k - 1].iter().all(|s| s.lr < eta);
                } else if spec.decay_start() >= b {
                    // warmup ends inside the first step
                    warmup_ok &= steps[0].lr == eta;
                }
            }
        }
    }
    let ok = worst < eta * 1e-5 && bounded && limits_agree && warmup_ok;
    check(
        ok,
        format!(
            "6 panels, max 1-token jump {:.2e} x eta_max, bounded {bounded}, boundary limits agree {limits_agree}, peak at 2^19 for all B {warmup_ok}",
            worst / eta
        ),
    )
}

fn grid_fidelity() -> Outcome {
    let g = GridAxes::default();
    let lr1024 = &g.lr[&1024];
    let expect_1024: Vec<f64> = (0..11).map(|k| (-12.0 + 0.5 * k as f64).exp2()).collect();
    let expect_256: Vec<f64> = (0..6).map(|k| (-11.0 + k as f64).exp2()).collect();
    let ok = *lr1024 == expect_1024
        && g.lr[&256] == expect_256
        && g.batch_sizes == (0..6).map(|k| 1u64 << (16 + 2 * k)).collect::<Vec<_>>()
        && g.tokens == (30..=35).map(|k| 1u64 << k).collect::<Vec<_>>()
        && g.widths == vec![256, 512, 1024]
        && g.bases() == vec![256, 1024]
        && enumerate_grid(&g).len() == g.size();
    check(
        ok,
        format!(
            "{} eta (base 1024), {} B, {} T, {} widths, {} bases",
            lr1024.len(),
            g.batch_sizes.len(),
            g.tokens.len(),
            g.widths.len(),
            g.bases().len()
        ),
    )
}

fn csv_bytes(rs: &RunSet) -> Vec<u8> {
    let mut buf = Vec::new();
    emit_csv(rs, &mut buf).expect("emit");
    buf
}

fn determinism() -> Outcome {
    let spec = OracleSpec {
        noise_sigma: 0.01,
        seed: 42,
        ..Default::default()
    };
    let grid = enumerate_grid(&base_1024_grid());
    let a = gen_surface(&spec, &grid).map_err(|e| e.to_string())?;
    let b = gen_surface(&spec, &grid).map_err(|e| e.to_string())?;
    let synth_same = a
        .records()
        .iter()
        .zip(b.records())
        .all(|(x, y)| x.val_loss.to_bits() == y.val_loss.to_bits());
    let csv = csv_bytes(&a);
    let config = PipelineConfig {
        target_tokens: Some(37f64.exp2()),
        ..Default::default()
    };
    let r1 = run_pipeline_csv(&csv, "runs.csv", &config).map_err(|e| e.to_string())?;
    let r2 = run_pipeline_csv(&csv, "runs.csv", &config).map_err(|e| e.to_string())?;
    let (j1, j2) = (r1.to_json().unwrap(), r2.to_json().unwrap());
    check(
        synth_same && j1 == j2,
        format!("synth bit-identical {synth_same}, report bytes identical {} ({} bytes)", j1 == j2, j1.len()),
    )
}

fn batch_drift() -> Outcome {
    let spec = OracleSpec::default();
    let axes = base_1024_grid();
    let rs = gen_surface(&spec, &enumerate_grid(&axes)).map_err(|e| e.to_string())?;
    let model = ModelKey {
        d_model: 1024,
        d_model_base: 1024,
    };
    let mut path = Vec::new();
    for &t in &axes.tokens {
        let table = best_loss_per_batch(&rs, model, t).map_err(|e| e.to_string())?;
        path.push(optimal_batch(&table).ok_or("no optimum")?.0);
    }
    let monotone = path.windows(2).all(|w| w[0] <= w[1]);
    let labels: Vec<String> = path.iter().map(|b| format!("2^{}", b.trailing_zeros())).collect();
    check(
        path.first() == Some(&(1 << 18)) && path.last() == Some(&(1 << 20)) && monotone,
        format!("B* over T = 2^30..2^35: {}", labels.join(" ")),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("surge-equation algebra", surge_algebra),
        ("limit regimes", limit_regimes),
        ("noiseless oracle recovery", noiseless_recovery),
        ("noisy oracle recovery", noisy_recovery),
        ("exponent consolidation", consolidation),
        ("recommendation continuity", recommendation_continuity),
        ("schedule contract", schedule_contract),
        ("grid fidelity", grid_fidelity),
        ("determinism", determinism),
        ("optimal batch drift", batch_drift),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
