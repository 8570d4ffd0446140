//! Asymmetric round-to-nearest integer quantization of token vectors.
//!
//! A group of values shares one step size `delta` and one real-valued
//! zero-point. Codes are `clamp(round_half_even(x / delta + z), 0, 2^B - 1)`
//! and reconstruct as `(code - z) * delta`. The quantization range always
//! contains zero: `[min(0, min x), max(0, max x)]`.
//!
//! Two granularities are supported:
//!
//! * per-token grouped: each token's `d` channels are split into `d / g`
//!   groups, each with its own parameters;
//! * per-channel: each channel has one parameter pair shared by every token
//!   of the block.
//!
//! Step sizes can be rounded onto the FP8 E4M3 grid and zero-points onto the
//! BF16 grid to emulate the metadata storage formats. The rounded values are
//! the ones stored in the block and read back by every consumer, including the
//! bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::matrix::Matrix;

/// Bits of metadata stored per group with FP8 scales and BF16 zero-points.
pub const EMULATED_GROUP_META_BITS: u32 = 8 + 16;

/// Largest finite FP8 E4M3 magnitude.
pub const FP8_E4M3_MAX: f64 = 448.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTokenGrouped,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleFormat {
    /// Step sizes rounded onto the FP8 E4M3 grid.
    Fp8E4m3,
    FullPrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroPointFormat {
    /// Zero-points rounded onto the BF16 grid.
    Bf16,
    FullPrecision,
}

impl ScaleFormat {
    pub fn bits(self) -> u32 {
        match self {
            ScaleFormat::Fp8E4m3 => 8,
            ScaleFormat::FullPrecision => 64,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ScaleFormat::Fp8E4m3 => emulate_fp8_e4m3(x),
            ScaleFormat::FullPrecision => x,
        }
    }
}

impl ZeroPointFormat {
    pub fn bits(self) -> u32 {
        match self {
            ZeroPointFormat::Bf16 => 16,
            ZeroPointFormat::FullPrecision => 64,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ZeroPointFormat::Bf16 => emulate_bf16(x),
            ZeroPointFormat::FullPrecision => x,
        }
    }
}

/// Quantizer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u8,
    pub group_size: usize,
    pub granularity: Granularity,
    pub scale_format: ScaleFormat,
    pub zeropoint_format: ZeroPointFormat,
    /// Rotate keys (and queries) with a randomized Hadamard transform.
    pub rotation: bool,
    /// Seed of the rotation sign vector.
    pub seed: u64,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            bits: 2,
            group_size: 32,
            granularity: Granularity::PerTokenGrouped,
            scale_format: ScaleFormat::Fp8E4m3,
            zeropoint_format: ZeroPointFormat::Bf16,
            rotation: true,
            seed: 0,
        }
    }
}

/// Bitwidths accepted by [`QuantSpec`]. 16 bits serves as a near-lossless
/// passthrough setting.
pub const SUPPORTED_BITS: [u8; 5] = [2, 3, 4, 8, 16];

impl QuantSpec {
    pub fn with_bits(mut self, bits: u8) -> Self {
        self.bits = bits;
        self
    }

    pub fn with_group_size(mut self, g: usize) -> Self {
        self.group_size = g;
        self
    }

    pub fn with_rotation(mut self, rotation: bool) -> Self {
        self.rotation = rotation;
        self
    }

    /// Full-precision scale and zero-point storage.
    pub fn full_precision_metadata(mut self) -> Self {
        self.scale_format = ScaleFormat::FullPrecision;
        self.zeropoint_format = ZeroPointFormat::FullPrecision;
        self
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Checks the spec against a head dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(Error::InvalidSpec(format!(
                "bits must be one of {SUPPORTED_BITS:?}, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidSpec("group size must be at least 1".into()));
        }
        if !d.is_multiple_of(self.group_size) {
            return Err(Error::InvalidSpec(format!(
                "group size {} does not divide dimension {d}",
                self.group_size
            )));
        }
        Ok(())
    }

    pub fn effective_bitwidth(&self) -> f64 {
        effective_bitwidth(self.bits, self.group_size)
    }
}

/// Step size and zero-point of one quantization group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub delta: f64,
    pub zero_point: f64,
}

impl GroupParams {
    /// Convention for groups whose values are all zero.
    pub const ALL_ZERO: GroupParams = GroupParams {
        delta: 1.0,
        zero_point: 0.0,
    };
}

/// Storage bits per element: payload plus one FP8 scale and one BF16
/// zero-point per group of `g` elements.
pub fn effective_bitwidth(bits: u8, group_size: usize) -> f64 {
    bits as f64 + EMULATED_GROUP_META_BITS as f64 / group_size as f64
}

/// Derives `(delta, zero_point)` for a group of values.
pub fn compute_group_params(
    x: &[f64],
    bits: u8,
    scale_format: ScaleFormat,
    zeropoint_format: ZeroPointFormat,
) -> Result<GroupParams> {
    if x.is_empty() {
        return Err(Error::Empty("quantization group"));
    }
    if !(1..=16).contains(&bits) {
        return Err(Error::InvalidSpec(format!("unsupported bitwidth {bits}")));
    }
    ensure_finite("quantization group", x)?;

    let lo = x.iter().copied().fold(0.0_f64, f64::min);
    let hi = x.iter().copied().fold(0.0_f64, f64::max);
    if lo == 0.0 && hi == 0.0 {
        return Ok(GroupParams::ALL_ZERO);
    }

    let levels = ((1u32 << bits) - 1) as f64;
    let mut delta = scale_format.apply((hi - lo) / levels);
    if delta == 0.0 {
        // Range below half the smallest FP8 subnormal: keep the group
        // representable instead of storing a zero step.
        delta = FP8_MIN_SUBNORMAL;
    }
    let zero_point = zeropoint_format.apply(-lo / delta);
    Ok(GroupParams { delta, zero_point })
}

/// Maps values to integer codes with round-half-to-even and clamping.
pub fn quantize(x: &[f64], params: GroupParams, bits: u8) -> Result<Vec<u16>> {
    let max_code = ((1u32 << bits) - 1) as f64;
    x.iter()
        .map(|&v| quantize_one(v, params, max_code))
        .collect()
}

#[inline]
fn quantize_one(v: f64, params: GroupParams, max_code: f64) -> Result<u16> {
    if !v.is_finite() {
        return Err(Error::NonFinite("quantize input"));
    }
    if params.delta == 0.0 {
        if v != 0.0 {
            return Err(Error::ZeroStep { value: v });
        }
        return Ok(0);
    }
    let code = (v / params.delta + params.zero_point)
        .round_ties_even()
        .clamp(0.0, max_code);
    Ok(code as u16)
}

/// Reconstructs `(code - z) * delta`.
pub fn dequantize(codes: &[u16], params: GroupParams) -> Vec<f64> {
    codes
        .iter()
        .map(|&c| (c as f64 - params.zero_point) * params.delta)
        .collect()
}

/// Packs codes into a little-endian bitstream: code `i` occupies bits
/// `[bits * i, bits * (i + 1))`. For 2, 4 and 8 bits this places code `i` at
/// bit offset `bits * (i mod (8 / bits))` of byte `i / (8 / bits)`.
pub fn pack_codes(codes: &[u16], bits: u8) -> Result<Vec<u8>> {
    check_pack_bits(bits)?;
    let max = (1u32 << bits) - 1;
    let n_bytes = (codes.len() * bits as usize).div_ceil(8);
    let mut out = vec![0u8; n_bytes];
    let mut bitpos = 0usize;
    for &code in codes {
        if code as u32 > max {
            return Err(Error::CodeOutOfRange {
                code: code as u32,
                bits,
            });
        }
        let mut value = code as u32;
        let mut remaining = bits as usize;
        while remaining > 0 {
            let byte = bitpos / 8;
            let shift = bitpos % 8;
            let take = remaining.min(8 - shift);
            out[byte] |= ((value & ((1 << take) - 1)) << shift) as u8;
            value >>= take;
            bitpos += take;
            remaining -= take;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], n: usize, bits: u8) -> Result<Vec<u16>> {
    check_pack_bits(bits)?;
    let needed = (n * bits as usize).div_ceil(8);
    if bytes.len() < needed {
        return Err(Error::DimensionMismatch {
            what: "packed code bytes",
            expected: needed,
            actual: bytes.len(),
        });
    }
    let mut out = Vec::with_capacity(n);
    let mut bitpos = 0usize;
    for _ in 0..n {
        let mut value = 0u32;
        let mut filled = 0usize;
        while filled < bits as usize {
            let byte = bitpos / 8;
            let shift = bitpos % 8;
            let take = (bits as usize - filled).min(8 - shift);
            let chunk = (bytes[byte] as u32 >> shift) & ((1 << take) - 1);
            value |= chunk << filled;
            filled += take;
            bitpos += take;
        }
        out.push(value as u16);
    }
    Ok(out)
}

fn check_pack_bits(bits: u8) -> Result<()> {
    if (1..=16).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("cannot pack {bits}-bit codes")))
    }
}

const FP8_MIN_SUBNORMAL: f64 = 1.0 / 512.0;

/// Rounds `x` to the nearest FP8 E4M3 value (ties to even), saturating at
/// ±448. Subnormals bottom out at 2^-9.
pub fn emulate_fp8_e4m3(x: f64) -> f64 {
    let r = round_to_binary_format(x, 3, -6);
    r.clamp(-FP8_E4M3_MAX, FP8_E4M3_MAX)
}

/// Rounds `x` to the nearest BF16 value (ties to even).
pub fn emulate_bf16(x: f64) -> f64 {
    round_to_binary_format(x, 7, -126)
}

/// Round-half-even onto a binary floating-point grid with `mantissa_bits`
/// explicit fraction bits and minimum normal exponent `min_exp`.
fn round_to_binary_format(x: f64, mantissa_bits: i32, min_exp: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let a = x.abs();
    let biased = ((a.to_bits() >> 52) & 0x7ff) as i32;
    let exp = (biased - 1023).max(min_exp);
    let quantum = 2.0_f64.powi(exp - mantissa_bits);
    let r = (a / quantum).round_ties_even() * quantum;
    r.copysign(x)
}

/// Packed integer codes for a block of tokens plus their group parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTokenBlock {
    bits: u8,
    granularity: Granularity,
    scale_format: ScaleFormat,
    zeropoint_format: ZeroPointFormat,
    n_tokens: usize,
    d: usize,
    group_size: usize,
    codes: Vec<u8>,
    /// Per-token-grouped: `n_tokens * (d / g)` entries, token-major.
    /// Per-channel: `d` entries.
    params: Vec<GroupParams>,
}

impl QuantizedTokenBlock {
    /// Quantizes the rows of `data` (one row per token).
    pub fn quantize(data: &Matrix, spec: &QuantSpec) -> Result<Self> {
        let d = data.cols();
        spec.validate(d)?;
        ensure_finite("token block", data.as_slice())?;
        let n = data.rows();
        let max_code = spec.max_code() as f64;
        let mut codes = vec![0u16; n * d];
        let params = match spec.granularity {
            Granularity::PerTokenGrouped => {
                let g = spec.group_size;
                let mut params = Vec::with_capacity(n * (d / g));
                for (t, row) in data.iter_rows().enumerate() {
                    for (j, group) in row.chunks_exact(g).enumerate() {
                        let p = compute_group_params(
                            group,
                            spec.bits,
                            spec.scale_format,
                            spec.zeropoint_format,
                        )?;
                        let base = t * d + j * g;
                        for (k, &v) in group.iter().enumerate() {
                            codes[base + k] = quantize_one(v, p, max_code)?;
                        }
                        params.push(p);
                    }
                }
                params
            }
            Granularity::PerChannel => {
                if n == 0 {
                    Vec::new()
                } else {
                    let mut params = Vec::with_capacity(d);
                    let mut column = vec![0.0; n];
                    for c in 0..d {
                        for (t, slot) in column.iter_mut().enumerate() {
                            *slot = data.get(t, c);
                        }
                        let p = compute_group_params(
                            &column,
                            spec.bits,
                            spec.scale_format,
                            spec.zeropoint_format,
                        )?;
                        for (t, &v) in column.iter().enumerate() {
                            codes[t * d + c] = quantize_one(v, p, max_code)?;
                        }
                        params.push(p);
                    }
                    params
                }
            }
        };
        Ok(Self {
            bits: spec.bits,
            granularity: spec.granularity,
            scale_format: spec.scale_format,
            zeropoint_format: spec.zeropoint_format,
            n_tokens: n,
            d,
            group_size: spec.group_size,
            codes: pack_codes(&codes, spec.bits)?,
            params,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups_per_token(&self) -> usize {
        self.d / self.group_size
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &[GroupParams] {
        &self.params
    }

    pub fn codes(&self) -> Vec<u16> {
        unpack_codes(&self.codes, self.n_tokens * self.d, self.bits)
            .expect("block holds a consistent packed payload")
    }

    fn param_for(&self, token: usize, channel: usize) -> GroupParams {
        match self.granularity {
            Granularity::PerTokenGrouped => {
                self.params[token * self.groups_per_token() + channel / self.group_size]
            }
            Granularity::PerChannel => self.params[channel],
        }
    }

    pub fn dequantize(&self) -> Matrix {
        let codes = self.codes();
        let mut data = Vec::with_capacity(codes.len());
        for t in 0..self.n_tokens {
            for c in 0..self.d {
                let p = self.param_for(t, c);
                data.push((codes[t * self.d + c] as f64 - p.zero_point) * p.delta);
            }
        }
        Matrix::from_vec(self.n_tokens, self.d, data).expect("shape is consistent")
    }

    /// Step sizes of one token at group resolution: `d / g` values for the
    /// per-token-grouped layout, `d` values for per-channel.
    pub fn group_deltas(&self, token: usize) -> Vec<f64> {
        match self.granularity {
            Granularity::PerTokenGrouped => {
                let groups = self.groups_per_token();
                self.params[token * groups..(token + 1) * groups]
                    .iter()
                    .map(|p| p.delta)
                    .collect()
            }
            Granularity::PerChannel => self.params.iter().map(|p| p.delta).collect(),
        }
    }

    /// Step sizes of one token expanded to one value per channel.
    pub fn channel_deltas(&self, token: usize) -> Vec<f64> {
        (0..self.d).map(|c| self.param_for(token, c).delta).collect()
    }

    /// Total stored bits: packed payload plus group metadata in the declared
    /// formats.
    pub fn storage_bits(&self) -> u64 {
        let payload = (self.n_tokens * self.d) as u64 * self.bits as u64;
        let meta = (self.scale_format.bits() + self.zeropoint_format.bits()) as u64;
        payload + self.params.len() as u64 * meta
    }

    /// Checks the internal consistency of a block read from disk.
    pub fn validate(&self) -> Result<()> {
        check_pack_bits(self.bits)?;
        if self.group_size == 0 || !self.d.is_multiple_of(self.group_size) {
            return Err(Error::InvalidSpec("group size must divide d".into()));
        }
        ensure_len(
            "packed code bytes",
            (self.n_tokens * self.d * self.bits as usize).div_ceil(8),
            self.codes.len(),
        )?;
        let expected_params = match self.granularity {
            Granularity::PerTokenGrouped => self.n_tokens * self.groups_per_token(),
            Granularity::PerChannel if self.n_tokens == 0 => 0,
            Granularity::PerChannel => self.d,
        };
        ensure_len("group parameters", expected_params, self.params.len())?;
        if self
            .params
            .iter()
            .any(|p| !(p.delta.is_finite() && p.delta >= 0.0 && p.zero_point.is_finite()))
        {
            return Err(Error::NonFinite("group parameters"));
        }
        Ok(())
    }
}
