//! Write a workload to disk as JKVT tensors and read it back.
//!
//! cargo run --example tensor_files

use jensenkv::harness::{generate_workload, TensorFile, Workload, WorkloadConfig};

fn main() -> jensenkv::Result<()> {
    let dir = std::env::temp_dir().join("jensenkv-tensor-files-example");
    let config = WorkloadConfig {
        queries: 4,
        cached: 32,
        current: 8,
        d: 16,
        d_v: 16,
        heads: 2,
        spec: jensenkv::QuantSpec::default().with_group_size(16),
        ..Default::default()
    };
    let workload = generate_workload(&config)?;
    workload.save(&dir)?;

    let q = TensorFile::read(dir.join("queries.jkvt"))?;
    let bytes = std::fs::read(dir.join("queries.jkvt"))?;
    println!("queries.jkvt: dims {:?}, {} bytes, header {:02x?}", q.dims, bytes.len(), &bytes[..8]);

    let back = Workload::load(&dir)?;
    let same = back.heads.iter().zip(&workload.heads).all(|(a, b)| a.cached_keys == b.cached_keys);
    println!("reloaded workload matches: {same}");
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
