//! Quantize a few tokens, inspect the packed codes and the reconstruction.
//!
//! cargo run --example quantize_roundtrip

use jensenkv::quant::{pack_codes, unpack_codes, QuantSpec, QuantizedTokenBlock};
use jensenkv::Matrix;

fn main() -> jensenkv::Result<()> {
    let x = Matrix::from_rows(
        8,
        &[
            [0.9, -1.3, 0.2, 2.4, -0.7, 0.0, 1.1, -2.0],
            [0.1, 0.3, -0.2, 0.05, 0.4, -0.35, 0.2, 0.0],
        ],
    )?;
    for (bits, full) in [(2, false), (4, false), (8, false), (8, true)] {
        let mut spec = QuantSpec::default()
            .with_bits(bits)
            .with_group_size(4)
            .with_rotation(false);
        if full {
            spec = spec.full_precision_metadata();
        }
        let block = QuantizedTokenBlock::quantize(&x, &spec)?;
        let xr = block.dequantize();
        // An FP8 scale may round below range / (2^B - 1); the top of the
        // range then clips, which shows at 8 bits.
        let meta = if full { "full-precision scales" } else { "fp8 scales" };
        println!(
            "INT{bits} ({meta}): {} packed bytes, {:.3} bits/element",
            block.packed_codes().len(),
            spec.effective_bitwidth()
        );
        for t in 0..x.rows() {
            let deltas = block.group_deltas(t);
            let worst = x.row(t).iter().zip(xr.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            println!("  token {t}: group steps {deltas:?}, max error {worst:.4}");
        }
    }

    let codes = [3u16, 0, 1, 2];
    let packed = pack_codes(&codes, 2)?;
    println!("2-bit codes {codes:?} pack to {packed:02x?}");
    assert_eq!(unpack_codes(&packed, 4, 2)?, codes);
    Ok(())
}
