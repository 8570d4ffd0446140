//! Two-block attention over a quantized cache in every correction mode.
//!
//! cargo run --example corrected_attention

use jensenkv::harness::experiment::rotation_for;
use jensenkv::harness::{generate_workload, WorkloadConfig};
use jensenkv::{attend, AttendOptions, CorrectionMode};

fn main() -> jensenkv::Result<()> {
    let config = WorkloadConfig {
        queries: 4,
        cached: 256,
        current: 64,
        heads: 1,
        ..Default::default()
    };
    let workload = generate_workload(&config)?;
    let head = &workload.heads[0];
    let rotation = rotation_for(&config.spec, config.d)?;
    let cache = head.build_cache(&config, rotation.as_ref())?;
    let (ref_weights, _) = head.reference()?;
    let ref_mass: f64 = ref_weights.row(0)[..config.cached].iter().sum();
    println!("query 0 cached mass: reference {ref_mass:.4}");

    for mode in [CorrectionMode::None, CorrectionMode::Exact, CorrectionMode::Taylor] {
        let w = head.attention_workload(cache.clone());
        let r = attend(&w, rotation.as_ref(), &AttendOptions::new(mode).recording())?;
        let mass: f64 = r.weights.as_ref().unwrap().row(0)[..config.cached].iter().sum();
        println!(
            "{:>7}: cached mass {mass:.4}, correction_ops / score_ops = {:.4}",
            mode.as_str(),
            r.cost.ratio()
        );
    }
    Ok(())
}
