//! Median shift of attention mass onto the quantized cache, with and without
//! correction, on the default synthetic workload.
//!
//! cargo run --example attention_stealing [-- <seed>]

use jensenkv::correction::CorrectionMode;
use jensenkv::harness::experiment::{experiment_on, run_reference};
use jensenkv::harness::{generate_workload, WorkloadConfig};

fn main() -> jensenkv::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let config = WorkloadConfig {
        seed,
        ..Default::default()
    };
    let workload = generate_workload(&config)?;
    let reference = run_reference(&workload)?;

    let split = config.cached as f64 / (config.cached + config.current) as f64;
    let mut p_s = Vec::new();
    for w in &reference.weights {
        for row in w.iter_rows() {
            p_s.push(row[..config.cached].iter().sum::<f64>());
        }
    }
    p_s.sort_by(f64::total_cmp);
    println!(
        "reference P_S: median {:.3} (token share {split:.3})",
        p_s[p_s.len() / 2]
    );

    println!("{:>4} {:>7} {:>12} {:>12} {:>12}", "bits", "mode", "median dP_S", "mean JSD", "output MSE");
    for bits in [2, 4] {
        for mode in CorrectionMode::ALL.into_iter().filter(|m| *m != CorrectionMode::PerChannelTaylor) {
            let mut cfg = config.clone();
            cfg.spec.bits = bits;
            cfg.mode = mode;
            let r = experiment_on(&workload, &reference, &cfg)?.diagnostics;
            println!(
                "{bits:>4} {:>7} {:>12.5} {:>12.3e} {:>12.3e}",
                mode.as_str(),
                r.delta_p_s.median,
                r.jsd.mean,
                r.output_mse
            );
        }
    }
    Ok(())
}
