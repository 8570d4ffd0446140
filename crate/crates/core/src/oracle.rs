//! Monte Carlo ground truth for the rounding-noise model and the correction.
//!
//! Noise draws are split into fixed chunks of [`CHUNK`] samples. Chunk `k`
//! draws from `ChaCha8Rng::seed_from_u64(seed)` switched to stream `k`, so
//! every estimate depends only on `(inputs, seed, n)` and not on the number
//! of worker threads. Partial sums are reduced in chunk order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::rotate_rows;
use crate::correction::{
    exact_correction, log_sinhc, score_noise_variance, taylor_correction, CorrectionMode,
};
use crate::diagnostics::{summarize_with_bins, Summary};
use crate::error::{ensure_len, ensure_finite, Error, Result};
use crate::matrix::{dot, Matrix};
use crate::quant::{Granularity, QuantSpec, QuantizedTokenBlock};
use crate::rotation::HadamardRotation;

/// Samples per independent sub-stream.
pub const CHUNK: usize = 4096;

/// Independent uniform rounding noise `eps_c ~ U(-delta_c/2, delta_c/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub deltas: Vec<f64>,
}

impl NoiseModel {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        ensure_finite("noise step sizes", &deltas)?;
        if deltas.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidConfig("negative step size".into()));
        }
        Ok(Self { deltas })
    }

    pub fn dim(&self) -> usize {
        self.deltas.len()
    }

    /// Per-channel variance `delta^2 / 12`.
    pub fn channel_variance(&self) -> Vec<f64> {
        self.deltas.iter().map(|d| d * d / 12.0).collect()
    }

    fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for (e, &d) in out.iter_mut().zip(&self.deltas) {
            let u: f64 = rng.random();
            *e = (u - 0.5) * d;
        }
    }

    /// One score-noise draw `q . eps / sqrt(d)`.
    fn score_noise<R: Rng>(&self, q: &[f64], rng: &mut R, inv_sqrt_d: f64) -> f64 {
        let mut acc = 0.0;
        for (&qc, &d) in q.iter().zip(&self.deltas) {
            let u: f64 = rng.random();
            acc += qc * (u - 0.5) * d;
        }
        acc * inv_sqrt_d
    }
}

/// Mean estimate with its standard error `sample_std / sqrt(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl McEstimate {
    /// `|mean - target|` in units of standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.std_error == 0.0 {
            if self.mean == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - target).abs() / self.std_error
        }
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn chunk_ranges(n: usize) -> Vec<(u64, usize)> {
    (0..n.div_ceil(CHUNK))
        .map(|k| (k as u64, CHUNK.min(n - k * CHUNK)))
        .collect()
}

/// Accumulates `sum(y)` and `sum(y^2)` for `y = x - shift` over all chunks.
fn estimate<F>(n: usize, seed: u64, shift: f64, f: F) -> McEstimate
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let partials: Vec<(f64, f64)> = chunk_ranges(n)
        .into_par_iter()
        .map(|(k, len)| {
            let mut rng = stream_rng(seed, k);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                let y = f(&mut rng) - shift;
                s += y;
                s2 += y * y;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partials
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let nf = n as f64;
    let mean_y = s / nf;
    let var = if n > 1 {
        ((s2 - nf * mean_y * mean_y) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    McEstimate {
        mean: mean_y + shift,
        std_error: (var / nf).sqrt(),
        n_samples: n,
        seed,
    }
}

/// `n` draws of the score noise `q . eps / sqrt(d)`.
pub fn sample_score_noise(q: &[f64], model: &NoiseModel, n: usize, seed: u64) -> Result<Vec<f64>> {
    ensure_len("query", model.dim(), q.len())?;
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let inv_sqrt_d = 1.0 / (q.len() as f64).sqrt();
    let chunks: Vec<Vec<f64>> = chunk_ranges(n)
        .into_par_iter()
        .map(|(k, len)| {
            let mut rng = stream_rng(seed, k);
            (0..len)
                .map(|_| model.score_noise(q, &mut rng, inv_sqrt_d))
                .collect()
        })
        .collect();
    Ok(chunks.concat())
}

/// Monte Carlo estimate of `E[exp(q . eps / sqrt(d))]`.
pub fn mc_expected_exp(q: &[f64], model: &NoiseModel, n: usize, seed: u64) -> Result<McEstimate> {
    ensure_len("query", model.dim(), q.len())?;
    ensure_finite("query", q)?;
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let inv_sqrt_d = 1.0 / (q.len() as f64).sqrt();
    Ok(estimate(n, seed, 1.0, |rng| {
        model.score_noise(q, rng, inv_sqrt_d).exp()
    }))
}

/// Closed form `prod_c sinh(alpha_c) / alpha_c` of the same expectation.
pub fn closed_form_expected_exp(q: &[f64], model: &NoiseModel) -> Result<f64> {
    Ok(exact_correction(q, &model.deltas, q.len())?.exp())
}

/// Cached partition-sum ratios `Z_hat / Z` (uncorrected) and
/// `Z_tilde / Z` (corrected), averaged over queries and noise draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionBias {
    pub uncorrected: McEstimate,
    pub corrected: McEstimate,
}

/// Quantizes `cached_keys` with `spec` (rotating keys and queries when the
/// spec asks for it) and measures the partition-sum bias under model noise
/// built from the stored step sizes.
pub fn mc_partition_bias(
    queries: &Matrix,
    cached_keys: &Matrix,
    spec: &QuantSpec,
    mode: CorrectionMode,
    n_draws: usize,
    seed: u64,
) -> Result<PartitionBias> {
    let d = queries.cols();
    ensure_len("cached key dimension", d, cached_keys.cols())?;
    if cached_keys.rows() == 0 {
        return Err(Error::Empty("cached block"));
    }
    if queries.rows() == 0 {
        return Err(Error::Empty("query block"));
    }
    if n_draws == 0 {
        return Err(Error::Empty("sample count"));
    }
    if mode == CorrectionMode::PerChannelTaylor && spec.granularity != Granularity::PerChannel {
        return Err(Error::InvalidConfig(
            "per-channel correction needs a per-channel quantized cache".into(),
        ));
    }
    let (queries, keys) = if spec.rotation {
        let r = HadamardRotation::new(d, spec.seed)?;
        (rotate_rows(queries, &r)?, rotate_rows(cached_keys, &r)?)
    } else {
        (queries.clone(), cached_keys.clone())
    };
    let block = QuantizedTokenBlock::quantize(&keys, spec)?;
    let n_keys = keys.rows();
    let deltas: Vec<NoiseModel> = (0..n_keys)
        .map(|i| NoiseModel::new(block.channel_deltas(i)))
        .collect::<Result<_>>()?;

    let scale = 1.0 / (d as f64).sqrt();
    // Per query: normalized reference weights w_i and corrections b_i.
    let mut weights = Vec::with_capacity(queries.rows());
    let mut corrections = Vec::with_capacity(queries.rows());
    for q in queries.iter_rows() {
        let scores: Vec<f64> = keys.iter_rows().map(|k| dot(q, k) * scale).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        weights.push(e.iter().map(|x| x / z).collect::<Vec<_>>());
        let b = deltas
            .iter()
            .map(|m| match mode {
                CorrectionMode::None => Ok(0.0),
                CorrectionMode::Exact => exact_correction(q, &m.deltas, d),
                CorrectionMode::Taylor | CorrectionMode::PerChannelTaylor => {
                    taylor_correction(q, &m.deltas, d)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        corrections.push(b.iter().map(|b| (-b).exp()).collect::<Vec<_>>());
    }

    let n_queries = queries.rows() as f64;
    let draw = |rng: &mut ChaCha8Rng, out: &mut [f64; 2], eps: &mut Vec<f64>| {
        for m in &deltas {
            let start = eps.len();
            eps.resize(start + d, 0.0);
            m.draw(rng, &mut eps[start..]);
        }
        let (mut unc, mut cor) = (0.0, 0.0);
        for (qi, q) in queries.iter_rows().enumerate() {
            let (mut zu, mut zc) = (0.0, 0.0);
            for i in 0..n_keys {
                let delta = dot(q, &eps[i * d..(i + 1) * d]) * scale;
                let e = weights[qi][i] * delta.exp();
                zu += e;
                zc += e * corrections[qi][i];
            }
            unc += zu;
            cor += zc;
        }
        eps.clear();
        out[0] = unc / n_queries;
        out[1] = cor / n_queries;
    };

    let partials: Vec<[f64; 4]> = chunk_ranges(n_draws)
        .into_par_iter()
        .map(|(k, len)| {
            let mut rng = stream_rng(seed, k);
            let mut eps = Vec::with_capacity(n_keys * d);
            let mut acc = [0.0; 4];
            let mut out = [0.0; 2];
            for _ in 0..len {
                draw(&mut rng, &mut out, &mut eps);
                let (yu, yc) = (out[0] - 1.0, out[1] - 1.0);
                acc[0] += yu;
                acc[1] += yu * yu;
                acc[2] += yc;
                acc[3] += yc * yc;
            }
            acc
        })
        .collect();
    let mut acc = [0.0; 4];
    for p in &partials {
        for (a, x) in acc.iter_mut().zip(p) {
            *a += x;
        }
    }
    let finish = |s: f64, s2: f64| {
        let nf = n_draws as f64;
        let mean = s / nf;
        let var = if n_draws > 1 {
            ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        McEstimate {
            mean: mean + 1.0,
            std_error: (var / nf).sqrt(),
            n_samples: n_draws,
            seed,
        }
    };
    Ok(PartitionBias {
        uncorrected: finish(acc[0], acc[1]),
        corrected: finish(acc[2], acc[3]),
    })
}

/// Histograms of `exp(s + delta)`, `exp(s + delta - b)` and the reference
/// value `exp(s)` for scalar score noise `delta ~ U(-width/2, width/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewDemo {
    pub score: f64,
    pub width: f64,
    /// Exact correction `log(sinh(width/2) / (width/2))`.
    pub correction: f64,
    pub reference: f64,
    pub uncorrected: Summary,
    pub corrected: Summary,
}

pub fn skew_demo(score: f64, width: f64, n: usize, bins: usize, seed: u64) -> Result<SkewDemo> {
    if !(score.is_finite() && width.is_finite()) || width < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "skew demo needs finite score and nonnegative width, got ({score}, {width})"
        )));
    }
    let model = NoiseModel::new(vec![width])?;
    let noise = sample_score_noise(&[1.0], &model, n, seed)?;
    let b = log_sinhc(width / 2.0);
    let unc: Vec<f64> = noise.iter().map(|d| (score + d).exp()).collect();
    let cor: Vec<f64> = noise.iter().map(|d| (score + d - b).exp()).collect();
    Ok(SkewDemo {
        score,
        width,
        correction: b,
        reference: score.exp(),
        uncorrected: summarize_with_bins(&unc, bins)?,
        corrected: summarize_with_bins(&cor, bins)?,
    })
}

/// Moments of real rounding residuals normalized by their step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub n: usize,
    pub mean: f64,
    /// Uniform noise gives 1/12.
    pub variance: f64,
    pub max_abs: f64,
}

/// Quantizes `n_tokens` standard-normal tokens of width `d` with `spec` and
/// reports the normalized residuals `(x_hat - x) / delta`. This tests the
/// uniform-noise assumption on actual rounding instead of assuming it.
pub fn empirical_residuals(spec: &QuantSpec, d: usize, n_tokens: usize, seed: u64) -> Result<ResidualStats> {
    if n_tokens == 0 {
        return Err(Error::Empty("token count"));
    }
    let mut rng = stream_rng(seed, 0);
    let data: Vec<f64> = (0..n_tokens * d).map(|_| rng.sample(StandardNormal)).collect();
    let x = Matrix::from_vec(n_tokens, d, data)?;
    let block = QuantizedTokenBlock::quantize(&x, spec)?;
    let x_hat = block.dequantize();
    let mut residuals = Vec::with_capacity(n_tokens * d);
    for t in 0..n_tokens {
        let deltas = block.channel_deltas(t);
        for c in 0..d {
            residuals.push((x_hat.get(t, c) - x.get(t, c)) / deltas[c]);
        }
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let variance = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(ResidualStats {
        n: residuals.len(),
        mean,
        variance,
        max_abs: residuals.iter().fold(0.0, |a, r| a.max(r.abs())),
    })
}

/// One closed-form-vs-Monte-Carlo comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormCheck {
    pub d: usize,
    pub closed_form: f64,
    pub estimate: McEstimate,
    pub z_score: f64,
    /// Score-noise variance of the configuration.
    pub sigma2: f64,
}

/// Random `(q, delta)` configurations cycling through `dims`, each compared
/// against the closed-form MGF with `n` samples. `q ~ N(0, 1)` and
/// `delta ~ U(0.1, 2.0)`, the range of INT2 steps on unit-variance keys.
pub fn closed_form_suite(
    n_configs: usize,
    dims: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<ClosedFormCheck>> {
    if dims.is_empty() {
        return Err(Error::Empty("dimension list"));
    }
    let mut rng = stream_rng(seed, u64::MAX);
    let mut out = Vec::with_capacity(n_configs);
    for i in 0..n_configs {
        let d = dims[i % dims.len()];
        let q: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let deltas: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..2.0)).collect();
        let model = NoiseModel::new(deltas)?;
        let closed_form = closed_form_expected_exp(&q, &model)?;
        let estimate = mc_expected_exp(&q, &model, n, seed.wrapping_add(i as u64 + 1))?;
        out.push(ClosedFormCheck {
            d,
            closed_form,
            z_score: estimate.z_score(closed_form),
            sigma2: score_noise_variance(&q, &model.deltas, d)?,
            estimate,
        });
    }
    Ok(out)
}
