//! Exact, Taylor and grouped corrections for one query against one
//! quantized key.
//!
//! cargo run --example bias_correction

use jensenkv::correction::{query_group_norms, PerChannelForm};
use jensenkv::quant::{QuantSpec, QuantizedTokenBlock};
use jensenkv::{
    exact_correction, grouped_taylor_correction, per_channel_correction, score_noise_variance, taylor_correction,
    Matrix,
};

fn main() -> jensenkv::Result<()> {
    let d = 64;
    let q: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin() * 1.5).collect();
    let k: Vec<f64> = (0..d).map(|i| (i as f64 * 0.91).cos()).collect();
    let spec = QuantSpec::default().with_rotation(false);
    let block = QuantizedTokenBlock::quantize(&Matrix::from_vec(1, d, k)?, &spec)?;
    let deltas = block.channel_deltas(0);

    let exact = exact_correction(&q, &deltas, d)?;
    let taylor = taylor_correction(&q, &deltas, d)?;
    let grouped = grouped_taylor_correction(&query_group_norms(&q, spec.group_size)?, &block.group_deltas(0), d)?;
    let sigma2 = score_noise_variance(&q, &deltas, d)?;
    println!("group steps {:?}", block.group_deltas(0));
    println!("exact   b = {exact:.8}");
    println!("taylor  b = {taylor:.8}  (sigma^2 / 2 = {:.8})", sigma2 / 2.0);
    println!("grouped b = {grouped:.8}");
    println!("exp(b) = {:.6}: expected inflation of exp(score) without correction", exact.exp());

    let shared = per_channel_correction(&q, &deltas, d, PerChannelForm::Exact)?;
    println!("per-channel exact form on the same steps: {shared:.8}");
    Ok(())
}
