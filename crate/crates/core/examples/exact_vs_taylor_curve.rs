//! Per-channel correction term, exact against its quadratic approximation.
//!
//! cargo run --example exact_vs_taylor_curve > curve.csv

use jensenkv::harness::experiment::{curve_csv, parse_alpha_range};

fn main() -> jensenkv::Result<()> {
    print!("{}", curve_csv(&parse_alpha_range("0:5:0.25")?));
    Ok(())
}
