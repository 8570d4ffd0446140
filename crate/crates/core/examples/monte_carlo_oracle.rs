//! Monte Carlo check of the closed-form expectation and the skew of
//! exponentiated noisy scores.
//!
//! cargo run --example monte_carlo_oracle

use jensenkv::oracle::{closed_form_expected_exp, mc_expected_exp, skew_demo, NoiseModel};

fn main() -> jensenkv::Result<()> {
    let q = [1.2, -0.4, 2.0, 0.7, -1.5, 0.3, 0.9, -0.8];
    let model = NoiseModel::new(vec![1.4, 1.1, 0.9, 1.6, 1.2, 0.8, 1.3, 1.0])?;
    let est = mc_expected_exp(&q, &model, 1_000_000, 1)?;
    let target = closed_form_expected_exp(&q, &model)?;
    println!(
        "E[exp(noise)]: Monte Carlo {:.6} +- {:.6}, closed form {target:.6}, |z| = {:.2}",
        est.mean,
        est.std_error,
        est.z_score(target)
    );

    let demo = skew_demo(0.0, 2.0, 1_000_000, 20, 2)?;
    println!("scalar score 0 with noise width 2 (alpha = 1), b = {:.6}", demo.correction);
    println!(
        "  uncorrected: mean {:.4}, median {:.4}",
        demo.uncorrected.mean, demo.uncorrected.median
    );
    println!("  corrected:   mean {:.4}, reference {:.4}", demo.corrected.mean, demo.reference);
    let h = &demo.uncorrected.histogram;
    for (i, c) in h.counts.iter().enumerate() {
        let lo = h.lo + i as f64 * h.bin_width;
        println!("  [{lo:.3}, {:.3}) {}", lo + h.bin_width, "#".repeat((*c / 2000) as usize));
    }
    Ok(())
}
