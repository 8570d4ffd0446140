//! A randomized Hadamard rotation spreads an outlier channel across all
//! channels while leaving dot products unchanged.
//!
//! cargo run --example hadamard_rotation

use jensenkv::matrix::dot;
use jensenkv::HadamardRotation;

fn main() -> jensenkv::Result<()> {
    let d = 128;
    let r = HadamardRotation::new(d, 7)?;
    let mut k: Vec<f64> = (0..d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    k[17] = 25.0;
    let q: Vec<f64> = (0..d).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect();

    let (hq, hk) = (r.rotate(&q)?, r.rotate(&k)?);
    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    println!("max |k| before {:.3}, after {:.3}", max_abs(&k), max_abs(&hk));
    println!("q.k = {:.12}, (Hq).(Hk) = {:.12}", dot(&q, &k), dot(&hq, &hk));

    let back = r.inverse(&hk)?;
    let err = back.iter().zip(&k).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("inverse roundtrip error {err:.2e}");

    let hq32 = r.rotate(&q.iter().map(|&x| x as f32).collect::<Vec<_>>())?;
    println!("f32 rotation agrees to {:.2e}", hq32.iter().zip(&hq).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max));
    Ok(())
}
