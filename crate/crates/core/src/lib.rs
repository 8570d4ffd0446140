//! Integer KV-cache quantization for softmax attention, with a closed-form
//! correction for the upward bias that zero-mean key rounding noise induces in
//! exponentiated attention scores.
//!
//! The pieces compose in the order a decoder uses them: [`quant`] stores key
//! and value tokens as packed integer codes, [`rotation`] smooths outlier
//! channels before quantization, [`correction`] computes the per-score bias
//! terms, [`attention`] runs the two-block (cached + current) attention with
//! those terms, and [`diagnostics`] measures the result against full
//! precision. [`oracle`] provides Monte Carlo ground truth and [`harness`]
//! drives synthetic experiments.

pub mod attention;
pub mod correction;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod oracle;
pub mod quant;
pub mod rotation;

pub use attention::{
    attend, reference_attention, AttendOptions, AttentionResult, AttentionWorkload, CostCounters,
    KvCache, ValuePrecision,
};
pub use correction::{
    exact_correction, grouped_taylor_correction, per_channel_correction, score_noise_variance,
    taylor_correction, CorrectionMode,
};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use quant::{effective_bitwidth, QuantSpec, QuantizedTokenBlock};
pub use rotation::{build_rotation, HadamardRotation};
