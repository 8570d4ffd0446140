use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{reference_attention, reference_weights, AttentionWorkload, KvCache};
use crate::error::{ensure_len, Error, Result};
use crate::harness::config::WorkloadConfig;
use crate::harness::tensor_file::TensorFile;
use crate::matrix::{dot, Matrix};
use crate::oracle::stream_rng;
use crate::rotation::HadamardRotation;

/// Full-precision tensors of one head, unrotated.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadData {
    pub queries: Matrix,
    pub cached_keys: Matrix,
    pub cached_values: Matrix,
    pub current_keys: Matrix,
    pub current_values: Matrix,
    /// Key channels scaled by the outlier magnitude.
    pub outlier_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub config: WorkloadConfig,
    pub heads: Vec<HeadData>,
}

/// Tensor file names inside a workload directory.
pub const TENSOR_FILES: [&str; 5] = [
    "queries.jkvt",
    "cached_keys.jkvt",
    "cached_values.jkvt",
    "current_keys.jkvt",
    "current_values.jkvt",
];

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    // Stored as f32 so the in-memory workload equals its JKVT round-trip.
    let data = (0..rows * cols)
        .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32 as f64)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sizes match")
}

fn scale_channels(m: &mut Matrix, channels: &[usize], magnitude: f64) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        for &c in channels {
            row[c] = (row[c] * magnitude) as f32 as f64;
        }
    }
}

/// Draws every head from its own ChaCha8 stream of `config.seed`: outlier
/// channel indices, then queries (scaled by `score_scale`), cached keys,
/// cached values, current keys and current values, all standard normal.
pub fn generate_workload(config: &WorkloadConfig) -> Result<Workload> {
    config.validate()?;
    let c = config;
    let heads = (0..c.heads)
        .map(|h| {
            let mut rng = stream_rng(c.seed, h as u64);
            let mut outliers = index::sample(&mut rng, c.d, c.outliers.channels).into_vec();
            outliers.sort_unstable();
            let queries = normal_matrix(&mut rng, c.queries, c.d, c.score_scale);
            let mut cached_keys = normal_matrix(&mut rng, c.cached, c.d, 1.0);
            let cached_values = normal_matrix(&mut rng, c.cached, c.d_v, 1.0);
            let mut current_keys = normal_matrix(&mut rng, c.current, c.d, 1.0);
            let current_values = normal_matrix(&mut rng, c.current, c.d_v, 1.0);
            scale_channels(&mut cached_keys, &outliers, c.outliers.magnitude);
            scale_channels(&mut current_keys, &outliers, c.outliers.magnitude);
            HeadData {
                queries,
                cached_keys,
                cached_values,
                current_keys,
                current_values,
                outlier_channels: outliers,
            }
        })
        .collect();
    Ok(Workload {
        config: config.clone(),
        heads,
    })
}

impl HeadData {
    /// Quantized cache written in chunks of `config.chunk_tokens`.
    pub fn build_cache(&self, config: &WorkloadConfig, rotation: Option<&HadamardRotation>) -> Result<KvCache> {
        let mut cache = KvCache::new(
            config.d,
            config.d_v,
            config.spec.clone(),
            config.value_precision,
            rotation,
        )?;
        self.fill(&mut cache, config.chunk_tokens, rotation)?;
        Ok(cache)
    }

    /// Unquantized cache holding the same tokens.
    pub fn passthrough_cache(&self, chunk_tokens: usize) -> Result<KvCache> {
        let mut cache = KvCache::passthrough(self.queries.cols(), self.cached_values.cols());
        self.fill(&mut cache, chunk_tokens, None)?;
        Ok(cache)
    }

    fn fill(&self, cache: &mut KvCache, chunk: usize, rotation: Option<&HadamardRotation>) -> Result<()> {
        let n = self.cached_keys.rows();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let k = slice_rows(&self.cached_keys, start, end);
            let v = slice_rows(&self.cached_values, start, end);
            cache.write_chunk(&k, &v, rotation)?;
            start = end;
        }
        Ok(())
    }

    pub fn attention_workload(&self, cache: KvCache) -> AttentionWorkload {
        AttentionWorkload {
            queries: self.queries.clone(),
            cache,
            current_keys: self.current_keys.clone(),
            current_values: self.current_values.clone(),
        }
    }

    pub fn all_keys(&self) -> Result<Matrix> {
        self.cached_keys.vstack(&self.current_keys)
    }

    pub fn all_values(&self) -> Result<Matrix> {
        self.cached_values.vstack(&self.current_values)
    }

    /// Full-precision reference weights and output.
    pub fn reference(&self) -> Result<(Matrix, Matrix)> {
        let k = self.all_keys()?;
        let v = self.all_values()?;
        Ok((
            reference_weights(&self.queries, &k)?,
            reference_attention(&self.queries, &k, &v)?,
        ))
    }

    /// Full-precision scores `q.k / sqrt(d)` over both blocks, flattened.
    pub fn reference_scores(&self) -> Result<Vec<f64>> {
        let k = self.all_keys()?;
        let scale = 1.0 / (self.queries.cols() as f64).sqrt();
        let mut out = Vec::with_capacity(self.queries.rows() * k.rows());
        for q in self.queries.iter_rows() {
            out.extend(k.iter_rows().map(|k| dot(q, k) * scale));
        }
        Ok(out)
    }
}

fn slice_rows(m: &Matrix, start: usize, end: usize) -> Matrix {
    let c = m.cols();
    Matrix::from_vec(end - start, c, m.as_slice()[start * c..end * c].to_vec()).expect("in bounds")
}

impl Workload {
    /// Writes `config.json` and the five `[heads, rows, cols]` tensors.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.config.save(dir.join("config.json"))?;
        let pick: [fn(&HeadData) -> &Matrix; 5] = [
            |h| &h.queries,
            |h| &h.cached_keys,
            |h| &h.cached_values,
            |h| &h.current_keys,
            |h| &h.current_values,
        ];
        for (name, f) in TENSOR_FILES.iter().zip(pick) {
            let ms: Vec<&Matrix> = self.heads.iter().map(f).collect();
            TensorFile::from_matrices(&ms)?.write(dir.join(name))?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Workload::save`]. Outlier channel
    /// indices are not stored and come back empty.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = WorkloadConfig::load(dir.join("config.json"))?;
        let mut tensors = TENSOR_FILES
            .iter()
            .map(|name| TensorFile::read(dir.join(name))?.to_matrices())
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut next = || tensors.next().expect("five tensors");
        let (q, ks, vs, kr, vr) = (next(), next(), next(), next(), next());
        let c = &config;
        let shapes = [
            (&q, c.queries, c.d),
            (&ks, c.cached, c.d),
            (&vs, c.cached, c.d_v),
            (&kr, c.current, c.d),
            (&vr, c.current, c.d_v),
        ];
        for (ms, rows, cols) in shapes {
            ensure_len("tensor head count", c.heads, ms.len())?;
            for m in ms {
                if (m.rows(), m.cols()) != (rows, cols) {
                    return Err(Error::Format(format!(
                        "tensor shape {}x{} does not match config {rows}x{cols}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        let heads = q
            .into_iter()
            .zip(ks)
            .zip(vs)
            .zip(kr)
            .zip(vr)
            .map(|((((queries, cached_keys), cached_values), current_keys), current_values)| HeadData {
                queries,
                cached_keys,
                cached_values,
                current_keys,
                current_values,
                outlier_channels: Vec::new(),
            })
            .collect();
        Ok(Self { config, heads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::OutlierConfig;

    fn small() -> WorkloadConfig {
        WorkloadConfig {
            queries: 4,
            cached: 40,
            current: 8,
            d: 32,
            d_v: 32,
            heads: 2,
            chunk_tokens: 16,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_workload(&small()).unwrap();
        let b = generate_workload(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_workload(&WorkloadConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.heads[0].queries, c.heads[0].queries);
        assert_ne!(a.heads[0].queries, a.heads[1].queries);
    }

    #[test]
    fn zero_score_scale_gives_uniform_attention() {
        let w = generate_workload(&WorkloadConfig { score_scale: 0.0, ..small() }).unwrap();
        let (weights, _) = w.heads[0].reference().unwrap();
        assert!(w.heads[0].reference_scores().unwrap().iter().all(|&s| s == 0.0));
        for &p in weights.as_slice() {
            assert!((p - 1.0 / 48.0).abs() < 1e-15);
        }
    }

    #[test]
    fn outlier_channel_is_large_and_rotation_shrinks_it() {
        let cfg = WorkloadConfig {
            cached: 256,
            d: 128,
            d_v: 128,
            heads: 1,
            outliers: OutlierConfig {
                channels: 1,
                magnitude: 10.0,
            },
            ..small()
        };
        let w = generate_workload(&cfg).unwrap();
        let head = &w.heads[0];
        let c = head.outlier_channels[0];
        let mean_abs = |m: &Matrix, ch: usize| -> f64 {
            m.iter_rows().map(|r| r[ch].abs()).sum::<f64>() / m.rows() as f64
        };
        assert!(mean_abs(&head.cached_keys, c) >= 5.0);
        let r = HadamardRotation::new(128, 3).unwrap();
        let rotated = crate::attention::rotate_rows(&head.cached_keys, &r).unwrap();
        let channel_max = |m: &Matrix| -> f64 {
            (0..m.cols())
                .map(|ch| m.iter_rows().fold(0.0_f64, |a, r| a.max(r[ch].abs())))
                .fold(0.0, f64::max)
        };
        assert!(channel_max(&rotated) < channel_max(&head.cached_keys));
    }

    #[test]
    fn cache_chunks_cover_all_tokens() {
        let cfg = small();
        let w = generate_workload(&cfg).unwrap();
        let r = HadamardRotation::new(cfg.d, cfg.spec.seed).unwrap();
        let cache = w.heads[0].build_cache(&cfg, Some(&r)).unwrap();
        assert_eq!(cache.len(), 40);
        assert_eq!(cache.key_blocks().len(), 3);
        let empty = WorkloadConfig { cached: 0, ..cfg };
        let w = generate_workload(&empty).unwrap();
        assert!(w.heads[0].build_cache(&empty, Some(&r)).unwrap().is_empty());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = generate_workload(&small()).unwrap();
        w.save(dir.path()).unwrap();
        let back = Workload::load(dir.path()).unwrap();
        for h in &mut w.heads {
            h.outlier_channels.clear();
        }
        assert_eq!(back, w);
    }
}
