//! Attention-level comparisons of a quantized run against the full-precision
//! reference: cached attention mass, its shift, Jensen-Shannon divergence of
//! the weight rows and attention-output MSE.

use serde::{Deserialize, Serialize};

use crate::attention::CostCounters;
use crate::correction::CorrectionMode;
use crate::error::{ensure_len, Error, Result};
use crate::matrix::Matrix;
use crate::quant::QuantSpec;

/// Tolerance on row sums accepted by [`attention_mass`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Default number of fixed-width histogram bins in summaries.
pub const HISTOGRAM_BINS: usize = 32;

/// Cached mass `P_S` (columns before `split`) and current mass `P_R = 1 - P_S`.
pub fn attention_mass(weights_row: &[f64], split: usize) -> Result<(f64, f64)> {
    if split > weights_row.len() {
        return Err(Error::DimensionMismatch {
            what: "split index",
            expected: weights_row.len(),
            actual: split,
        });
    }
    let total: f64 = weights_row.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::NotNormalized { sum: total });
    }
    let p_s: f64 = weights_row[..split].iter().sum();
    Ok((p_s, 1.0 - p_s))
}

/// Per-row `P_S(test) - P_S(ref)`.
pub fn attention_mass_shift(
    reference: &Matrix,
    test: &Matrix,
    split: usize,
) -> Result<Vec<f64>> {
    ensure_len("weight rows", reference.rows(), test.rows())?;
    ensure_len("weight columns", reference.cols(), test.cols())?;
    reference
        .iter_rows()
        .zip(test.iter_rows())
        .map(|(r, t)| Ok(attention_mass(t, split)?.0 - attention_mass(r, split)?.0))
        .collect()
}

/// Base-2 Jensen-Shannon divergence, in `[0, 1]`.
pub fn jensen_shannon_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_len("distribution length", p.len(), q.len())?;
    if let Some(&neg) = p.iter().chain(q).find(|&&x| x < 0.0 || x.is_nan()) {
        return Err(Error::NegativeProbability(neg));
    }
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).log2();
        }
        if b > 0.0 {
            acc += b * (b / m).log2();
        }
    }
    Ok((0.5 * acc).clamp(0.0, 1.0))
}

/// Mean over all elements of the squared difference.
pub fn attention_output_mse(reference: &Matrix, test: &Matrix) -> Result<f64> {
    ensure_len("output rows", reference.rows(), test.rows())?;
    ensure_len("output columns", reference.cols(), test.cols())?;
    let n = reference.as_slice().len();
    if n == 0 {
        return Err(Error::Empty("attention output"));
    }
    let sum: f64 = reference
        .as_slice()
        .iter()
        .zip(test.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

/// Percentile of sorted data by rank `floor(p/100 * n) + 1` (1-based, clamped
/// to `n`): the smallest value with more than `p` percent of the data at or
/// below it.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).floor() as usize + 1).min(n);
    sorted[rank - 1]
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    summarize_with_bins(values, HISTOGRAM_BINS)
}

/// Mean, percentiles and a fixed-width histogram over `[min, max]`.
pub fn summarize_with_bins(values: &[f64], bins: usize) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("summary input"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("summary input"));
    }
    let bins = bins.max(1);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let bin_width = if hi > lo { (hi - lo) / bins as f64 } else { 0.0 };
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = if bin_width > 0.0 {
            (((v - lo) / bin_width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    Ok(Summary {
        count: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: percentile(&sorted, 50.0),
        p5: percentile(&sorted, 5.0),
        p95: percentile(&sorted, 95.0),
        min: lo,
        max: hi,
        histogram: Histogram {
            lo,
            hi,
            bin_width,
            counts,
        },
    })
}

/// Weights and output of one head, for either the reference or a test run.
#[derive(Debug, Clone, Copy)]
pub struct HeadRun<'a> {
    pub weights: &'a Matrix,
    pub output: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub head: usize,
    pub query: usize,
    pub p_s_ref: f64,
    pub p_s_hat: f64,
    pub delta_p_s: f64,
    pub jsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub spec: Option<QuantSpec>,
    pub mode: CorrectionMode,
    pub seed: u64,
    pub n_queries: usize,
    pub delta_p_s: Summary,
    pub jsd: Summary,
    pub output_mse: f64,
    pub cost: CostCounters,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_query: Option<Vec<QueryRecord>>,
}

/// Aggregated comparison of a test run against the reference across heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub records: Vec<QueryRecord>,
    pub output_mse: f64,
}

impl Comparison {
    pub fn delta_p_s(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta_p_s).collect()
    }

    pub fn jsd(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.jsd).collect()
    }

    pub fn median_delta_p_s(&self) -> f64 {
        median(&self.delta_p_s())
    }

    pub fn mean_jsd(&self) -> f64 {
        let v = self.jsd();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn into_report(
        self,
        spec: Option<QuantSpec>,
        mode: CorrectionMode,
        seed: u64,
        cost: CostCounters,
        keep_per_query: bool,
    ) -> Result<DiagnosticsReport> {
        Ok(DiagnosticsReport {
            spec,
            mode,
            seed,
            n_queries: self.records.len(),
            delta_p_s: summarize(&self.delta_p_s())?,
            jsd: summarize(&self.jsd())?,
            output_mse: self.output_mse,
            cost,
            per_query: keep_per_query.then_some(self.records),
        })
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    percentile(&s, 50.0)
}

/// Compares per-head test runs against per-head reference runs. `split` is
/// the number of cached columns in every weight row.
pub fn compare(reference: &[HeadRun<'_>], test: &[HeadRun<'_>], split: usize) -> Result<Comparison> {
    ensure_len("head count", reference.len(), test.len())?;
    if reference.is_empty() {
        return Err(Error::Empty("head list"));
    }
    let mut records = Vec::new();
    let mut sq_sum = 0.0;
    let mut n_elems = 0usize;
    for (head, (r, t)) in reference.iter().zip(test).enumerate() {
        ensure_len("weight rows", r.weights.rows(), t.weights.rows())?;
        ensure_len("weight columns", r.weights.cols(), t.weights.cols())?;
        for (query, (rw, tw)) in r.weights.iter_rows().zip(t.weights.iter_rows()).enumerate() {
            let p_s_ref = attention_mass(rw, split)?.0;
            let p_s_hat = attention_mass(tw, split)?.0;
            records.push(QueryRecord {
                head,
                query,
                p_s_ref,
                p_s_hat,
                delta_p_s: p_s_hat - p_s_ref,
                jsd: jensen_shannon_divergence(tw, rw)?,
            });
        }
        let mse = attention_output_mse(r.output, t.output)?;
        let n = r.output.as_slice().len();
        sq_sum += mse * n as f64;
        n_elems += n;
    }
    Ok(Comparison {
        records,
        output_mse: sq_sum / n_elems as f64,
    })
}
