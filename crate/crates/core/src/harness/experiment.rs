use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttendOptions, AttentionResult, CostCounters};
use crate::correction::{exact_vs_taylor_curve, CorrectionMode};
use crate::diagnostics::{compare, summarize, DiagnosticsReport, HeadRun, Histogram, Summary};
use crate::error::{Error, Result};
use crate::harness::config::WorkloadConfig;
use crate::harness::workload::{generate_workload, Workload};
use crate::matrix::Matrix;
use crate::quant::QuantSpec;
use crate::rotation::HadamardRotation;

/// Version of every JSON report written by the harness.
pub const SCHEMA_VERSION: u32 = 1;

/// Reports keep per-query records only up to this many queries.
pub const PER_QUERY_LIMIT: usize = 4096;

pub fn rotation_for(spec: &QuantSpec, d: usize) -> Result<Option<HadamardRotation>> {
    spec.rotation
        .then(|| HadamardRotation::new(d, spec.seed))
        .transpose()
}

/// Full-precision reference weights and outputs, one pair per head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub weights: Vec<Matrix>,
    pub outputs: Vec<Matrix>,
}

pub fn run_reference(workload: &Workload) -> Result<ReferenceRun> {
    let pairs = workload
        .heads
        .par_iter()
        .map(|h| h.reference())
        .collect::<Result<Vec<_>>>()?;
    let (weights, outputs) = pairs.into_iter().unzip();
    Ok(ReferenceRun { weights, outputs })
}

/// Quantizes every head's cache with `config.spec` and attends with `mode`.
/// Heads run in parallel; each head is computed sequentially.
pub fn run_quantized(
    workload: &Workload,
    config: &WorkloadConfig,
    mode: CorrectionMode,
    record_weights: bool,
) -> Result<Vec<AttentionResult>> {
    config.validate()?;
    let rotation = rotation_for(&config.spec, config.d)?;
    let mut opts = AttendOptions::new(mode);
    if record_weights {
        opts = opts.recording();
    }
    workload
        .heads
        .par_iter()
        .map(|h| {
            let cache = h.build_cache(config, rotation.as_ref())?;
            attend(&h.attention_workload(cache), rotation.as_ref(), &opts)
        })
        .collect()
}

pub fn total_cost(results: &[AttentionResult]) -> CostCounters {
    let mut c = CostCounters::default();
    for r in results {
        c += r.cost;
    }
    c
}

/// Compares recorded runs against the reference.
pub fn diagnose_runs(
    reference: &ReferenceRun,
    results: &[AttentionResult],
    split: usize,
    spec: Option<QuantSpec>,
    mode: CorrectionMode,
    seed: u64,
) -> Result<DiagnosticsReport> {
    let refs: Vec<HeadRun> = reference
        .weights
        .iter()
        .zip(&reference.outputs)
        .map(|(weights, output)| HeadRun { weights, output })
        .collect();
    let tests = results
        .iter()
        .map(|r| {
            let weights = r
                .weights
                .as_ref()
                .ok_or(Error::InvalidConfig("run did not record weights".into()))?;
            Ok(HeadRun {
                weights,
                output: &r.output,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare(&refs, &tests, split)?;
    let keep = cmp.records.len() <= PER_QUERY_LIMIT;
    cmp.into_report(spec, mode, seed, total_cost(results), keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: WorkloadConfig,
    pub diagnostics: DiagnosticsReport,
}

/// Generates the workload of `config` and diagnoses `config.mode` against
/// the full-precision reference.
pub fn run_experiment(config: &WorkloadConfig) -> Result<ExperimentReport> {
    let workload = generate_workload(config)?;
    let reference = run_reference(&workload)?;
    experiment_on(&workload, &reference, config)
}

/// Same as [`run_experiment`] on an existing workload and reference. Only
/// the spec, mode and value precision of `config` may differ from the
/// workload's own config.
pub fn experiment_on(workload: &Workload, reference: &ReferenceRun, config: &WorkloadConfig) -> Result<ExperimentReport> {
    let results = run_quantized(workload, config, config.mode, true)?;
    let diagnostics = diagnose_runs(
        reference,
        &results,
        config.cached,
        Some(config.spec.clone()),
        config.mode,
        config.seed,
    )?;
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        diagnostics,
    })
}

pub const SWEEP_GROUP_SIZES: [usize; 3] = [128, 64, 32];
pub const SWEEP_BITS: [u8; 2] = [2, 4];
pub const SWEEP_MODES: [CorrectionMode; 2] = [CorrectionMode::None, CorrectionMode::Taylor];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bits: u8,
    pub group_size: usize,
    pub mode: CorrectionMode,
    pub effective_bits: f64,
    pub output_mse: f64,
    pub median_delta_p_s: f64,
    pub mean_jsd: f64,
    pub cost_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config: WorkloadConfig,
    /// Full-precision scores of the workload, for calibration against real
    /// activations.
    pub scores: Summary,
    pub rows: Vec<SweepRow>,
}

/// Storage/quality trade-off over group sizes, bitwidths and modes on one
/// workload.
pub fn sweep(config: &WorkloadConfig) -> Result<SweepReport> {
    let workload = generate_workload(config)?;
    let reference = run_reference(&workload)?;
    let mut scores = Vec::new();
    for h in &workload.heads {
        scores.extend(h.reference_scores()?);
    }
    let mut rows = Vec::new();
    for &group_size in &SWEEP_GROUP_SIZES {
        for &bits in &SWEEP_BITS {
            for &mode in &SWEEP_MODES {
                let mut cfg = config.clone();
                cfg.spec.bits = bits;
                cfg.spec.group_size = group_size;
                cfg.mode = mode;
                let r = experiment_on(&workload, &reference, &cfg)?.diagnostics;
                rows.push(SweepRow {
                    bits,
                    group_size,
                    mode,
                    effective_bits: cfg.spec.effective_bitwidth(),
                    output_mse: r.output_mse,
                    median_delta_p_s: r.delta_p_s.median,
                    mean_jsd: r.jsd.mean,
                    cost_ratio: r.cost.ratio(),
                });
            }
        }
    }
    Ok(SweepReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        scores: summarize(&scores)?,
        rows,
    })
}

impl SweepReport {
    /// Plain-text table, one row per configuration.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>4} {:>5} {:>8} {:>8} {:>12} {:>12} {:>12} {:>8}\n",
            "bits", "g", "mode", "eff_bits", "output_mse", "median_dPs", "mean_jsd", "cost"
        );
        for r in &self.rows {
            out += &format!(
                "{:>4} {:>5} {:>8} {:>8.4} {:>12.4e} {:>12.5} {:>12.4e} {:>8.4}\n",
                r.bits, r.group_size, r.mode.as_str(), r.effective_bits, r.output_mse, r.median_delta_p_s, r.mean_jsd, r.cost_ratio
            );
        }
        out
    }
}

/// Parses `start:stop:step` into an inclusive grid.
pub fn parse_alpha_range(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidConfig(format!("expected start:stop:step, got {s:?}"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || step <= 0.0 || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// `alpha,exact,taylor` CSV of the per-channel correction terms.
pub fn curve_csv(alphas: &[f64]) -> String {
    let mut out = String::from("alpha,exact,taylor\n");
    for (a, (e, t)) in alphas.iter().zip(exact_vs_taylor_curve(alphas)) {
        out += &format!("{a},{e},{t}\n");
    }
    out
}

/// `lo,hi,count` CSV of a histogram.
pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("lo,hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let lo = h.lo + i as f64 * h.bin_width;
        out += &format!("{lo},{},{c}\n", lo + h.bin_width);
    }
    out
}
