//! Storage/quality trade-off: group size, bitwidth and correction mode.
//!
//! cargo run --example storage_sweep

use jensenkv::harness::{sweep, WorkloadConfig};

fn main() -> jensenkv::Result<()> {
    let config = WorkloadConfig {
        heads: 2,
        ..Default::default()
    };
    let report = sweep(&config)?;
    print!("{}", report.table());
    println!(
        "reference scores: p5 {:.3}, median {:.3}, p95 {:.3}",
        report.scores.p5, report.scores.median, report.scores.p95
    );
    Ok(())
}
