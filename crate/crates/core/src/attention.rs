//! Reference softmax attention over a quantized cached block and a
//! full-precision current block.
//!
//! For each query row the engine computes cached scores from dequantized
//! keys, subtracts the per-score bias correction from the cached block only,
//! appends the current-block scores, applies a max-shifted softmax and
//! weights the concatenated values (cached first, then current).
//!
//! Corrections are evaluated on the fly per (query, cached token) from
//! per-query group norms and per-key squared step sizes; the full correction
//! matrix is never materialized.

use serde::{Deserialize, Serialize};

use crate::correction::{exact_unchecked, grouped_from_squares, taylor_unchecked, CorrectionMode};
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::matrix::{dot, Matrix};
use crate::quant::{Granularity, QuantSpec, QuantizedTokenBlock};
use crate::rotation::HadamardRotation;

/// Storage precision of the value cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValuePrecision {
    /// Values quantized with the same spec as keys (never rotated).
    #[default]
    Quantized,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KeyBlock {
    Quantized(QuantizedTokenBlock),
    /// Unquantized keys; every step size is zero.
    Passthrough(Matrix),
}

impl KeyBlock {
    pub fn n_tokens(&self) -> usize {
        match self {
            KeyBlock::Quantized(b) => b.n_tokens(),
            KeyBlock::Passthrough(m) => m.rows(),
        }
    }

    pub fn dequantize(&self) -> Matrix {
        match self {
            KeyBlock::Quantized(b) => b.dequantize(),
            KeyBlock::Passthrough(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValueBlock {
    Quantized(QuantizedTokenBlock),
    Full(Matrix),
}

impl ValueBlock {
    pub fn dequantize(&self) -> Matrix {
        match self {
            ValueBlock::Quantized(b) => b.dequantize(),
            ValueBlock::Full(m) => m.clone(),
        }
    }
}

/// Key/value cache for one attention head. Chunks are appended with
/// [`KvCache::write_chunk`] and never modified afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    d: usize,
    d_v: usize,
    /// `None` for a passthrough (unquantized) cache.
    spec: Option<QuantSpec>,
    value_precision: ValuePrecision,
    rotation_seed: Option<u64>,
    key_blocks: Vec<KeyBlock>,
    value_blocks: Vec<ValueBlock>,
}

impl KvCache {
    /// Empty quantized cache. When `spec.rotation` is set, `rotation` must be
    /// given; its seed is recorded and checked on every later use.
    pub fn new(
        d: usize,
        d_v: usize,
        spec: QuantSpec,
        value_precision: ValuePrecision,
        rotation: Option<&HadamardRotation>,
    ) -> Result<Self> {
        spec.validate(d)?;
        if value_precision == ValuePrecision::Quantized {
            spec.validate(d_v)?;
        }
        let rotation_seed = match (spec.rotation, rotation) {
            (true, Some(r)) => {
                ensure_len("rotation dimension", d, r.dim())?;
                Some(r.seed())
            }
            (true, None) => {
                return Err(Error::InvalidConfig(
                    "spec requests rotation but no rotation was supplied".into(),
                ))
            }
            (false, Some(r)) => {
                return Err(Error::RotationMismatch {
                    cache: None,
                    query: Some(r.seed()),
                })
            }
            (false, None) => None,
        };
        Ok(Self {
            d,
            d_v,
            spec: Some(spec),
            value_precision,
            rotation_seed,
            key_blocks: Vec::new(),
            value_blocks: Vec::new(),
        })
    }

    /// Empty cache that stores keys and values in full precision.
    pub fn passthrough(d: usize, d_v: usize) -> Self {
        Self {
            d,
            d_v,
            spec: None,
            value_precision: ValuePrecision::Full,
            rotation_seed: None,
            key_blocks: Vec::new(),
            value_blocks: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn value_dim(&self) -> usize {
        self.d_v
    }

    pub fn spec(&self) -> Option<&QuantSpec> {
        self.spec.as_ref()
    }

    pub fn rotation_seed(&self) -> Option<u64> {
        self.rotation_seed
    }

    pub fn value_precision(&self) -> ValuePrecision {
        self.value_precision
    }

    pub fn key_blocks(&self) -> &[KeyBlock] {
        &self.key_blocks
    }

    pub fn value_blocks(&self) -> &[ValueBlock] {
        &self.value_blocks
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.key_blocks.iter().map(KeyBlock::n_tokens).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_rotation(&self, rotation: Option<&HadamardRotation>) -> Result<()> {
        let query = rotation.map(HadamardRotation::seed);
        if query != self.rotation_seed {
            return Err(Error::RotationMismatch {
                cache: self.rotation_seed,
                query,
            });
        }
        Ok(())
    }

    /// Quantizes a chunk of full-precision keys and values and appends it.
    /// Keys are rotated first when the cache was built with a rotation.
    pub fn write_chunk(
        &mut self,
        keys: &Matrix,
        values: &Matrix,
        rotation: Option<&HadamardRotation>,
    ) -> Result<()> {
        ensure_len("chunk key dimension", self.d, keys.cols())?;
        ensure_len("chunk value dimension", self.d_v, values.cols())?;
        ensure_len("chunk value rows", keys.rows(), values.rows())?;
        ensure_finite("chunk keys", keys.as_slice())?;
        ensure_finite("chunk values", values.as_slice())?;
        self.check_rotation(rotation)?;

        let Some(spec) = &self.spec else {
            self.key_blocks.push(KeyBlock::Passthrough(keys.clone()));
            self.value_blocks.push(ValueBlock::Full(values.clone()));
            return Ok(());
        };
        let rotated;
        let keys = match rotation {
            Some(r) => {
                rotated = rotate_rows(keys, r)?;
                &rotated
            }
            None => keys,
        };
        let key_block = QuantizedTokenBlock::quantize(keys, spec)?;
        let value_block = match self.value_precision {
            ValuePrecision::Quantized => {
                ValueBlock::Quantized(QuantizedTokenBlock::quantize(values, spec)?)
            }
            ValuePrecision::Full => ValueBlock::Full(values.clone()),
        };
        self.key_blocks.push(KeyBlock::Quantized(key_block));
        self.value_blocks.push(value_block);
        Ok(())
    }

    /// Dequantized keys of all chunks, in write order (rotated space if the
    /// cache is rotated).
    pub fn dequantized_keys(&self) -> Matrix {
        stack(self.d, self.key_blocks.iter().map(KeyBlock::dequantize))
    }

    pub fn dequantized_values(&self) -> Matrix {
        stack(self.d_v, self.value_blocks.iter().map(ValueBlock::dequantize))
    }

    /// Validates a cache loaded from disk.
    pub fn validate(&self) -> Result<()> {
        ensure_len("value blocks", self.key_blocks.len(), self.value_blocks.len())?;
        for (k, v) in self.key_blocks.iter().zip(&self.value_blocks) {
            match k {
                KeyBlock::Quantized(b) => {
                    b.validate()?;
                    ensure_len("key block dimension", self.d, b.dim())?;
                }
                KeyBlock::Passthrough(m) => ensure_len("key block dimension", self.d, m.cols())?,
            }
            let (rows, cols) = match v {
                ValueBlock::Quantized(b) => {
                    b.validate()?;
                    (b.n_tokens(), b.dim())
                }
                ValueBlock::Full(m) => (m.rows(), m.cols()),
            };
            ensure_len("value block rows", k.n_tokens(), rows)?;
            ensure_len("value block dimension", self.d_v, cols)?;
        }
        Ok(())
    }
}

fn stack(cols: usize, blocks: impl Iterator<Item = Matrix>) -> Matrix {
    let mut data = Vec::new();
    let mut rows = 0;
    for m in blocks {
        rows += m.rows();
        data.extend(m.into_vec());
    }
    Matrix::from_vec(rows, cols, data).expect("blocks share a column count")
}

pub(crate) fn rotate_rows(m: &Matrix, r: &HadamardRotation) -> Result<Matrix> {
    ensure_len("rotation dimension", r.dim(), m.cols())?;
    let mut out = m.clone();
    for i in 0..out.rows() {
        r.rotate_in_place(out.row_mut(i))?;
    }
    Ok(out)
}

/// Query block plus the cache it attends to and the full-precision current chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWorkload {
    pub queries: Matrix,
    pub cache: KvCache,
    pub current_keys: Matrix,
    pub current_values: Matrix,
}

impl AttentionWorkload {
    pub fn n_cached(&self) -> usize {
        self.cache.len()
    }

    pub fn n_current(&self) -> usize {
        self.current_keys.rows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.cache.dim();
        let d_v = self.cache.value_dim();
        if self.queries.rows() == 0 {
            return Err(Error::Empty("query block"));
        }
        if self.current_keys.rows() == 0 {
            return Err(Error::Empty("current block"));
        }
        ensure_len("query dimension", d, self.queries.cols())?;
        ensure_len("current key dimension", d, self.current_keys.cols())?;
        ensure_len("current value dimension", d_v, self.current_values.cols())?;
        ensure_len(
            "current value rows",
            self.current_keys.rows(),
            self.current_values.rows(),
        )?;
        ensure_finite("queries", self.queries.as_slice())?;
        ensure_finite("current keys", self.current_keys.as_slice())?;
        ensure_finite("current values", self.current_values.as_slice())
    }
}

/// Multiply-add counts of one attention call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    /// `M * (|S| + |R|) * d` for the two score blocks.
    pub score_ops: u64,
    /// Work spent computing corrections.
    pub correction_ops: u64,
}

impl CostCounters {
    pub fn ratio(&self) -> f64 {
        if self.score_ops == 0 {
            0.0
        } else {
            self.correction_ops as f64 / self.score_ops as f64
        }
    }
}

impl std::ops::AddAssign for CostCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.score_ops += rhs.score_ops;
        self.correction_ops += rhs.correction_ops;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttendOptions {
    pub mode: CorrectionMode,
    /// Keep pre-softmax scores and weights in the result.
    pub record_weights: bool,
}

impl AttendOptions {
    pub fn new(mode: CorrectionMode) -> Self {
        Self {
            mode,
            record_weights: false,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_weights = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// `M x d_v`.
    pub output: Matrix,
    /// Row-stochastic `M x (|S| + |R|)`, cached columns first.
    pub weights: Option<Matrix>,
    /// Corrected pre-softmax scores, same layout as `weights`.
    pub scores: Option<Matrix>,
    pub cost: CostCounters,
}

/// Per-block precomputation of correction inputs.
enum BlockCorrection {
    Zero,
    /// Squared group step sizes per token, `n_tokens * G` values.
    Grouped { groups: usize, delta_sq: Vec<f64> },
    /// Expanded per-channel step sizes per token, `n_tokens * d` values.
    Exact { deltas: Vec<f64> },
    /// Step sizes shared by all tokens of the block.
    Shared { deltas: Vec<f64>, exact: bool },
}

fn plan_block(block: &KeyBlock, mode: CorrectionMode, cost: &mut CostCounters) -> Result<BlockCorrection> {
    let KeyBlock::Quantized(b) = block else {
        return Ok(BlockCorrection::Zero);
    };
    let n = b.n_tokens();
    if mode == CorrectionMode::None || n == 0 {
        return Ok(BlockCorrection::Zero);
    }
    Ok(match (b.granularity(), mode) {
        (_, CorrectionMode::None) => unreachable!(),
        (Granularity::PerChannel, m) => BlockCorrection::Shared {
            deltas: b.channel_deltas(0),
            exact: m == CorrectionMode::Exact,
        },
        (Granularity::PerTokenGrouped, CorrectionMode::PerChannelTaylor) => {
            return Err(Error::InvalidConfig(
                "per-channel correction needs a per-channel quantized cache".into(),
            ))
        }
        (Granularity::PerTokenGrouped, CorrectionMode::Taylor) => {
            let groups = b.groups_per_token();
            let mut delta_sq = Vec::with_capacity(n * groups);
            for t in 0..n {
                delta_sq.extend(b.group_deltas(t).iter().map(|x| x * x));
            }
            cost.correction_ops += (n * groups) as u64;
            BlockCorrection::Grouped { groups, delta_sq }
        }
        (Granularity::PerTokenGrouped, CorrectionMode::Exact) => {
            let mut deltas = Vec::with_capacity(n * b.dim());
            for t in 0..n {
                deltas.extend(b.channel_deltas(t));
            }
            BlockCorrection::Exact { deltas }
        }
    })
}

/// Runs attention of `workload.queries` over the cached block followed by the
/// current block. `rotation` must match the rotation the cache was written
/// with; queries and current keys are rotated with it.
pub fn attend(
    workload: &AttentionWorkload,
    rotation: Option<&HadamardRotation>,
    opts: &AttendOptions,
) -> Result<AttentionResult> {
    workload.validate()?;
    let cache = &workload.cache;
    cache.check_rotation(rotation)?;
    let d = cache.dim();
    let d_v = cache.value_dim();
    let m = workload.queries.rows();
    let n_cached = cache.len();
    let n_total = n_cached + workload.n_current();
    let scale = 1.0 / (d as f64).sqrt();

    let (queries, current_keys) = match rotation {
        Some(r) => (
            rotate_rows(&workload.queries, r)?,
            rotate_rows(&workload.current_keys, r)?,
        ),
        None => (workload.queries.clone(), workload.current_keys.clone()),
    };

    let mut cost = CostCounters {
        score_ops: (m * n_total * d) as u64,
        correction_ops: 0,
    };
    let plans = cache
        .key_blocks()
        .iter()
        .map(|b| plan_block(b, opts.mode, &mut cost))
        .collect::<Result<Vec<_>>>()?;
    let needs_group_norms = plans
        .iter()
        .any(|p| matches!(p, BlockCorrection::Grouped { .. }));
    let group_size = cache.spec().map(|s| s.group_size).unwrap_or(d);

    let cached_keys = cache.dequantized_keys();
    let values = cache.dequantized_values().vstack(&workload.current_values)?;

    let mut output = Matrix::zeros(m, d_v);
    let mut all_weights = opts.record_weights.then(|| Matrix::zeros(m, n_total));
    let mut all_scores = opts.record_weights.then(|| Matrix::zeros(m, n_total));
    let mut row = vec![0.0; n_total];
    let mut group_norms = Vec::new();

    for qi in 0..m {
        let q = queries.row(qi);
        if needs_group_norms {
            group_norms = q
                .chunks_exact(group_size)
                .map(|c| c.iter().map(|x| x * x).sum())
                .collect();
            cost.correction_ops += d as u64;
        }

        let mut col = 0;
        for (block, plan) in cache.key_blocks().iter().zip(&plans) {
            let n = block.n_tokens();
            let shared = match plan {
                BlockCorrection::Shared { deltas, exact } => {
                    cost.correction_ops += d as u64;
                    Some(if *exact {
                        exact_unchecked(q, deltas, d)
                    } else {
                        taylor_unchecked(q, deltas, d)
                    })
                }
                _ => None,
            };
            for t in 0..n {
                let s = dot(q, cached_keys.row(col)) * scale;
                let b = match plan {
                    BlockCorrection::Zero => 0.0,
                    BlockCorrection::Grouped { groups, delta_sq } => {
                        cost.correction_ops += *groups as u64;
                        grouped_from_squares(
                            &group_norms,
                            delta_sq[t * groups..(t + 1) * groups].iter().copied(),
                            d,
                        )
                    }
                    BlockCorrection::Exact { deltas } => {
                        cost.correction_ops += d as u64;
                        exact_unchecked(q, &deltas[t * d..(t + 1) * d], d)
                    }
                    BlockCorrection::Shared { .. } => shared.unwrap_or(0.0),
                };
                row[col] = s - b;
                col += 1;
            }
        }
        for k in current_keys.iter_rows() {
            row[col] = dot(q, k) * scale;
            col += 1;
        }

        if let Some(s) = all_scores.as_mut() {
            s.row_mut(qi).copy_from_slice(&row);
        }
        softmax_in_place(&mut row);
        weighted_sum(&row, &values, output.row_mut(qi));
        if let Some(w) = all_weights.as_mut() {
            w.row_mut(qi).copy_from_slice(&row);
        }
    }

    Ok(AttentionResult {
        output,
        weights: all_weights,
        scores: all_scores,
        cost,
    })
}

/// Max-shifted softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn weighted_sum(weights: &[f64], values: &Matrix, out: &mut [f64]) {
    out.fill(0.0);
    for (w, v) in weights.iter().zip(values.iter_rows()) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}

/// Plain softmax attention weights `softmax(Q K^T / sqrt(d))`, `M x N`.
pub fn reference_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    ensure_len("key dimension", q.cols(), k.cols())?;
    if k.rows() == 0 {
        return Err(Error::Empty("key block"));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut w = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let row = w.row_mut(i);
        for (slot, key) in row.iter_mut().zip(k.iter_rows()) {
            *slot = dot(q.row(i), key) * scale;
        }
        softmax_in_place(row);
    }
    Ok(w)
}

/// Full-precision softmax attention `softmax(Q K^T / sqrt(d)) V`.
pub fn reference_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    ensure_len("value rows", k.rows(), v.rows())?;
    let w = reference_weights(q, k)?;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        weighted_sum(w.row(i), v, out.row_mut(i));
    }
    Ok(out)
}
