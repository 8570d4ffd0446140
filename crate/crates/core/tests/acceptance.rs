//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so the verdict lines always print; exits non-zero on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use jensenkv::attention::{attend, reference_attention, reference_weights, AttendOptions, KvCache};
use jensenkv::correction::{exact_correction, log_sinhc, score_noise_variance, taylor_correction, CorrectionMode};
use jensenkv::harness::experiment::{experiment_on, rotation_for, run_reference};
use jensenkv::harness::suites::{
    unbiasedness_check, CLOSED_FORM_CONFIGS, CLOSED_FORM_DIMS, CLOSED_FORM_MAX_Z, CLOSED_FORM_SAMPLES, UNBIASED_BAND,
    UNBIASED_D, UNBIASED_SAMPLES,
};
use jensenkv::harness::{generate_workload, Workload, WorkloadConfig};
use jensenkv::oracle::closed_form_suite;
use jensenkv::quant::{
    compute_group_params, dequantize, effective_bitwidth, pack_codes, quantize, unpack_codes, QuantSpec,
    QuantizedTokenBlock, ScaleFormat, ZeroPointFormat,
};
use jensenkv::{AttentionWorkload, HadamardRotation, Matrix};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn timed<F: FnOnce() -> Verdict>(limit: Duration, f: F) -> Verdict {
    let start = Instant::now();
    let mut v = f();
    let took = start.elapsed();
    v.detail += &format!("; {:.1}s (limit {}s)", took.as_secs_f64(), limit.as_secs());
    v.pass &= took < limit;
    v
}

fn criterion_1() -> Verdict {
    timed(Duration::from_secs(60), || {
        let checks = closed_form_suite(CLOSED_FORM_CONFIGS, &CLOSED_FORM_DIMS, CLOSED_FORM_SAMPLES, SEED).unwrap();
        let worst = checks.iter().map(|c| c.z_score).fold(0.0, f64::max);
        let dims_ok = CLOSED_FORM_DIMS.iter().all(|d| checks.iter().any(|c| c.d == *d));
        verdict(
            checks.len() >= 20 && dims_ok && worst <= CLOSED_FORM_MAX_Z,
            format!(
                "{} configs, d in {CLOSED_FORM_DIMS:?}, n = {CLOSED_FORM_SAMPLES}, max |z| = {worst:.3} <= {CLOSED_FORM_MAX_Z}",
                checks.len()
            ),
        )
    })
}

fn criterion_2() -> Verdict {
    timed(Duration::from_secs(60), || {
        let pb = unbiasedness_check(UNBIASED_SAMPLES, SEED).unwrap();
        let r = pb.corrected.mean;
        verdict(
            (UNBIASED_BAND.0..=UNBIASED_BAND.1).contains(&r),
            format!(
                "d = {UNBIASED_D}, INT2 g=32, n = {UNBIASED_SAMPLES}: corrected ratio {r:.5} in {UNBIASED_BAND:?} (uncorrected {:.5})",
                pb.uncorrected.mean
            ),
        )
    })
}

fn criterion_3() -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 2000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (1usize..=256).prop_flat_map(|d| {
        (
            prop::collection::vec(-50.0f64..50.0, d),
            prop::collection::vec(0.0f64..20.0, d),
        )
    });
    let worst = std::cell::Cell::new(0.0_f64);
    let result = runner.run(&strategy, |(q, deltas)| {
        let d = q.len();
        let t = taylor_correction(&q, &deltas, d).unwrap();
        let half_var = score_noise_variance(&q, &deltas, d).unwrap() / 2.0;
        let rel = if t == 0.0 { half_var.abs() } else { (t - half_var).abs() / t.abs() };
        worst.set(worst.get().max(rel));
        prop_assert!(rel <= 1e-12, "relative gap {}", rel);
        Ok(())
    });
    verdict(
        result.is_ok(),
        format!("2000 random (q, delta), d in 1..=256: max relative gap {:.2e} <= 1e-12", worst.get()),
    )
}

fn criterion_4() -> Verdict {
    let mut dominance = true;
    let mut worst_rel = 0.0_f64;
    let n = 500_000;
    for i in 0..=n {
        let a = 50.0 * i as f64 / n as f64;
        let exact = log_sinhc(a);
        let taylor = a * a / 6.0;
        dominance &= taylor >= exact;
        if a > 0.0 && a <= 0.25 {
            worst_rel = worst_rel.max((taylor - exact).abs() / exact);
        }
    }
    // also through the vector API, including negative alphas
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for _ in 0..10_000 {
        let d = rng.random_range(1..=64);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-100.0..100.0)).collect();
        let deltas: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..4.0)).collect();
        dominance &= taylor_correction(&q, &deltas, d).unwrap() >= exact_correction(&q, &deltas, d).unwrap();
    }
    verdict(
        dominance && worst_rel < 0.01,
        format!("taylor >= exact on alpha in [0, 50] (grid of {n}) and 10000 vectors: {dominance}; max relative error on (0, 0.25] = {worst_rel:.3e} < 1e-2"),
    )
}

fn criterion_5() -> Verdict {
    let got = [effective_bitwidth(2, 32), effective_bitwidth(2, 128), effective_bitwidth(4, 32)];
    verdict(
        got == [2.75, 2.1875, 4.75],
        format!("(2,32) = {}, (2,128) = {}, (4,32) = {}", got[0], got[1], got[2]),
    )
}

struct DefaultRuns {
    int2_none: (f64, f64, f64),
    int2_taylor: (f64, f64, f64),
    int4_none: (f64, f64, f64),
    ratio: f64,
    elapsed: Duration,
}

/// (median delta P_S, mean JSD, output MSE) on the default workload.
fn default_runs() -> DefaultRuns {
    let start = Instant::now();
    let config = WorkloadConfig {
        seed: SEED,
        ..Default::default()
    };
    let workload = generate_workload(&config).unwrap();
    let reference = run_reference(&workload).unwrap();
    let run = |bits: u8, mode: CorrectionMode| {
        let mut cfg = config.clone();
        cfg.spec.bits = bits;
        cfg.mode = mode;
        experiment_on(&workload, &reference, &cfg).unwrap().diagnostics
    };
    let summary = |r: &jensenkv::diagnostics::DiagnosticsReport| (r.delta_p_s.median, r.jsd.mean, r.output_mse);
    let taylor = run(2, CorrectionMode::Taylor);
    DefaultRuns {
        int2_none: summary(&run(2, CorrectionMode::None)),
        int2_taylor: summary(&taylor),
        int4_none: summary(&run(4, CorrectionMode::None)),
        ratio: taylor.cost.ratio(),
        elapsed: start.elapsed(),
    }
}

fn criterion_6(r: &DefaultRuns) -> Verdict {
    let (unc, cor) = (r.int2_none.0, r.int2_taylor.0);
    verdict(
        unc > 0.02 && cor.abs() < 0.5 * unc && r.elapsed < Duration::from_secs(120),
        format!(
            "median dP_S uncorrected {unc:.5} > 0.02, taylor {cor:.5} (|.| < {:.5}); {:.1}s (limit 120s)",
            0.5 * unc,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(r: &DefaultRuns) -> Verdict {
    let (int4, int2) = (r.int4_none.0, r.int2_none.0);
    verdict(int4 < int2, format!("median dP_S uncorrected INT4 {int4:.5} < INT2 {int2:.5}"))
}

fn criterion_8(r: &DefaultRuns) -> Verdict {
    let (jsd_u, jsd_c) = (r.int2_none.1, r.int2_taylor.1);
    let (mse_u, mse_c) = (r.int2_none.2, r.int2_taylor.2);
    verdict(
        jsd_c < jsd_u && mse_c < mse_u,
        format!("INT2 mean JSD {jsd_c:.4e} < {jsd_u:.4e}, output MSE {mse_c:.4e} < {mse_u:.4e}"),
    )
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    // Roundtrip, full-precision metadata. The bound allows the rounding of
    // the reconstruction arithmetic itself (a few ulps of the group range).
    let mut roundtrip_ok = true;
    let mut worst_ratio = 0.0_f64;
    for &bits in &[2u8, 3, 4, 8] {
        for &g in &[1usize, 8, 32, 128] {
            for _ in 0..50 {
                let scale: f64 = rng.random_range(0.01..100.0);
                let x: Vec<f64> = (0..g).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                let p = compute_group_params(&x, bits, ScaleFormat::FullPrecision, ZeroPointFormat::FullPrecision).unwrap();
                let xr = dequantize(&quantize(&x, p, bits).unwrap(), p);
                let range = x.iter().fold(0.0_f64, |a, v| a.max(v.abs())) * 2.0;
                for (a, b) in x.iter().zip(&xr) {
                    let err = (a - b).abs();
                    worst_ratio = worst_ratio.max(err / p.delta);
                    roundtrip_ok &= err <= p.delta / 2.0 + 8.0 * f64::EPSILON * range;
                }
            }
        }
    }
    // whole blocks through the public block API
    for &bits in &[2u8, 4] {
        let x = Matrix::from_vec(16, 64, (0..16 * 64).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let spec = QuantSpec::default().with_bits(bits).with_rotation(false).full_precision_metadata();
        let block = QuantizedTokenBlock::quantize(&x, &spec).unwrap();
        let xr = block.dequantize();
        for t in 0..16 {
            let deltas = block.channel_deltas(t);
            for c in 0..64 {
                roundtrip_ok &= (x.get(t, c) - xr.get(t, c)).abs() <= deltas[c] / 2.0 + 1e-14;
            }
        }
    }

    let mut pack_ok = true;
    for bits in 1u8..=16 {
        for n in [0usize, 1, 7, 8, 9, 33, 1000] {
            let max = (1u32 << bits) - 1;
            let codes: Vec<u16> = (0..n).map(|_| rng.random_range(0..=max) as u16).collect();
            let packed = pack_codes(&codes, bits).unwrap();
            pack_ok &= packed.len() == (n * bits as usize).div_ceil(8);
            pack_ok &= unpack_codes(&packed, n, bits).unwrap() == codes;
        }
    }

    let mut worst_rel = 0.0_f64;
    for seed in 0..200u64 {
        let r = HadamardRotation::new(128, seed).unwrap();
        let q: Vec<f32> = (0..128).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let k: Vec<f32> = (0..128).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let (hq, hk) = (r.rotate(&q).unwrap(), r.rotate(&k).unwrap());
        let rotated: f32 = hq.iter().zip(&hk).map(|(a, b)| a * b).sum();
        let exact: f64 = q.iter().zip(&k).map(|(&a, &b)| a as f64 * b as f64).sum();
        let norms = q.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt()
            * k.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        worst_rel = worst_rel.max((rotated as f64 - exact).abs() / norms);
    }
    verdict(
        roundtrip_ok && pack_ok && worst_rel <= 1e-5,
        format!(
            "roundtrip <= delta/2: {roundtrip_ok} (max |err|/delta {worst_ratio:.6}); pack/unpack identity for 1..=16 bits: {pack_ok}; f32 Hadamard score error {worst_rel:.2e} <= 1e-5 (relative to |q||k|, d = 128)"
        ),
    )
}

fn attend_all(workload: &Workload, config: &WorkloadConfig, mode: CorrectionMode, caches: &[KvCache]) -> Duration {
    let rotation = rotation_for(&config.spec, config.d).unwrap();
    let opts = AttendOptions::new(mode);
    let start = Instant::now();
    for (h, c) in workload.heads.iter().zip(caches) {
        let w = AttentionWorkload {
            queries: h.queries.clone(),
            cache: c.clone(),
            current_keys: h.current_keys.clone(),
            current_values: h.current_values.clone(),
        };
        std::hint::black_box(attend(&w, rotation.as_ref(), &opts).unwrap());
    }
    start.elapsed()
}

fn criterion_10(r: &DefaultRuns) -> Verdict {
    let config = WorkloadConfig {
        seed: SEED,
        ..Default::default()
    };
    let workload = generate_workload(&config).unwrap();
    let rotation = rotation_for(&config.spec, config.d).unwrap();
    let caches: Vec<KvCache> = workload
        .heads
        .iter()
        .map(|h| h.build_cache(&config, rotation.as_ref()).unwrap())
        .collect();
    let (mut none, mut taylor) = (Duration::MAX, Duration::MAX);
    for _ in 0..9 {
        none = none.min(attend_all(&workload, &config, CorrectionMode::None, &caches));
        taylor = taylor.min(attend_all(&workload, &config, CorrectionMode::Taylor, &caches));
    }
    let overhead = taylor.as_secs_f64() / none.as_secs_f64() - 1.0;
    let limit = 1.0 / 32.0 + 0.02;
    verdict(
        r.ratio <= limit && overhead < 0.15,
        format!(
            "correction_ops/score_ops {:.5} <= {limit:.5}; wall-clock overhead {:.1}% < 15% (min of 9: none {:.1} ms, taylor {:.1} ms)",
            r.ratio,
            100.0 * overhead,
            none.as_secs_f64() * 1e3,
            taylor.as_secs_f64() * 1e3
        ),
    )
}

fn criterion_11() -> Verdict {
    let config = WorkloadConfig {
        queries: 16,
        cached: 0,
        current: 64,
        heads: 2,
        seed: SEED,
        ..Default::default()
    };
    let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let modes = [CorrectionMode::None, CorrectionMode::Exact, CorrectionMode::Taylor];
    let mut ok = true;

    // |S| = 0 with a quantized (empty) cache, unrotated so the query path is
    // untouched.
    let mut empty = config.clone();
    empty.spec.rotation = false;
    let w = generate_workload(&empty).unwrap();
    for h in &w.heads {
        let want_w = reference_weights(&h.queries, &h.current_keys).unwrap();
        let want_o = reference_attention(&h.queries, &h.current_keys, &h.current_values).unwrap();
        let cache = h.build_cache(&empty, None).unwrap();
        for mode in modes {
            let res = attend(&h.attention_workload(cache.clone()), None, &AttendOptions::new(mode).recording()).unwrap();
            ok &= bits(&res.output) == bits(&want_o) && bits(res.weights.as_ref().unwrap()) == bits(&want_w);
        }
    }

    // delta = 0: unquantized passthrough cache with a full cached block
    let full = WorkloadConfig { cached: 96, ..config };
    let w = generate_workload(&full).unwrap();
    for h in &w.heads {
        let (want_w, want_o) = h.reference().unwrap();
        let cache = h.passthrough_cache(full.chunk_tokens).unwrap();
        for mode in modes {
            let res = attend(&h.attention_workload(cache.clone()), None, &AttendOptions::new(mode).recording()).unwrap();
            ok &= bits(&res.output) == bits(&want_o) && bits(res.weights.as_ref().unwrap()) == bits(&want_w);
        }
    }
    verdict(
        ok,
        "|S| = 0 and delta = 0 caches, modes none/exact/taylor: outputs and weights bit-identical to reference",
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "closed form vs Monte Carlo", criterion_1()),
        (2, "unbiased partition sum", criterion_2()),
        (3, "CGF identity", criterion_3()),
        (4, "Taylor dominance", criterion_4()),
        (5, "effective bitwidth", criterion_5()),
    ];
    let runs = default_runs();
    results.push((6, "attention stealing", criterion_6(&runs)));
    results.push((7, "bitwidth monotonicity", criterion_7(&runs)));
    results.push((8, "JSD and MSE orderings", criterion_8(&runs)));
    results.push((9, "quantizer contracts", criterion_9()));
    results.push((10, "cost accounting", criterion_10(&runs)));
    results.push((11, "degenerate caches", criterion_11()));

    let mut failed = 0;
    for (n, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {n:>2} ({name}): {}", v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
