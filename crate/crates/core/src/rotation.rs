//! Randomized Hadamard rotation `H = (1/sqrt(d)) * W * diag(signs)` with `W`
//! the Sylvester-ordered Walsh matrix.
//!
//! Sign vectors come from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`):
//! sign `i` is `-1` when the low bit of the `i`-th `next_u64` draw is set.
//! ChaCha output is specified independently of platform and word size, so a
//! `(d, seed)` pair names the same rotation everywhere.

use std::ops::{Add, Mul, Neg, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HadamardRotation {
    d: usize,
    seed: u64,
    signs: Vec<i8>,
}

/// Builds the rotation for head dimension `d` (a power of two).
pub fn build_rotation(d: usize, seed: u64) -> Result<HadamardRotation> {
    HadamardRotation::new(d, seed)
}

impl HadamardRotation {
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "Hadamard rotation needs a power-of-two dimension, got {d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signs = (0..d)
            .map(|_| if rng.next_u64() & 1 == 1 { -1 } else { 1 })
            .collect();
        Ok(Self { d, seed, signs })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    /// Returns `H x`.
    pub fn rotate<T: Float>(&self, x: &[T]) -> Result<Vec<T>> {
        let mut out = x.to_vec();
        self.rotate_in_place(&mut out)?;
        Ok(out)
    }

    /// Applies `H` in place: sign flip, fast Walsh-Hadamard butterflies,
    /// then `1/sqrt(d)` scaling. O(d log d).
    pub fn rotate_in_place<T: Float>(&self, x: &mut [T]) -> Result<()> {
        ensure_len("rotation input", self.d, x.len())?;
        for (v, &s) in x.iter_mut().zip(&self.signs) {
            if s < 0 {
                *v = -*v;
            }
        }
        fwht(x);
        let norm = T::from_f64(1.0 / (self.d as f64).sqrt());
        for v in x.iter_mut() {
            *v = *v * norm;
        }
        Ok(())
    }

    /// Returns `H^T y`, undoing [`HadamardRotation::rotate`].
    pub fn inverse<T: Float>(&self, y: &[T]) -> Result<Vec<T>> {
        ensure_len("rotation input", self.d, y.len())?;
        let mut out = y.to_vec();
        fwht(&mut out);
        let norm = T::from_f64(1.0 / (self.d as f64).sqrt());
        for (v, &s) in out.iter_mut().zip(&self.signs) {
            *v = *v * norm;
            if s < 0 {
                *v = -*v;
            }
        }
        Ok(out)
    }

    /// Dense `d x d` matrix, row-major. Test and inspection helper.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d * self.d];
        for j in 0..self.d {
            let mut e = vec![0.0; self.d];
            e[j] = 1.0;
            let col = self.rotate(&e).expect("length matches");
            for i in 0..self.d {
                m[i * self.d + j] = col[i];
            }
        }
        m
    }
}

/// Unnormalized in-place Walsh-Hadamard transform; `x.len()` must be a power
/// of two.
fn fwht<T: Float>(x: &mut [T]) {
    let n = x.len();
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for i in block..block + h {
                let a = x[i];
                let b = x[i + h];
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Float types the rotation runs in.
pub trait Float:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
}

impl Float for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Float for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::dot;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn d1_is_plus_or_minus_one() {
        for seed in 0..8 {
            let r = build_rotation(1, seed).unwrap();
            let h = r.to_dense();
            assert_eq!(h.len(), 1);
            assert_eq!(h[0].abs(), 1.0);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(build_rotation(0, 1).is_err());
        assert!(build_rotation(12, 1).is_err());
        assert!(build_rotation(96, 1).is_err());
    }

    #[test]
    fn orthogonal_d4() {
        let r = build_rotation(4, 42).unwrap();
        let h = r.to_dense();
        for i in 0..4 {
            for j in 0..4 {
                let hth: f64 = (0..4).map(|k| h[k * 4 + i] * h[k * 4 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((hth - want).abs() < 1e-12, "({i},{j}) = {hth}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = build_rotation(128, 7).unwrap();
        let b = build_rotation(128, 7).unwrap();
        let c = build_rotation(128, 8).unwrap();
        assert_eq!(a.signs(), b.signs());
        assert_ne!(a.signs(), c.signs());
    }

    #[test]
    fn walsh_2x2() {
        let r = HadamardRotation {
            d: 2,
            seed: 0,
            signs: vec![1, 1],
        };
        let y = r.rotate(&[1.0_f64, 0.0]).unwrap();
        let s = 1.0 / 2.0_f64.sqrt();
        assert!((y[0] - s).abs() < 1e-15 && (y[1] - s).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let r = build_rotation(8, 0).unwrap();
        assert!(r.rotate(&[1.0_f64; 4]).is_err());
    }

    #[test]
    fn inverse_undoes_rotation() {
        let r = build_rotation(64, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        let back = r.inverse(&r.rotate(&x).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn preserves_scores_and_norms() {
        let r = build_rotation(128, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q: Vec<f64> = (0..128).map(|_| rng.sample(StandardNormal)).collect();
            let k: Vec<f64> = (0..128).map(|_| rng.sample(StandardNormal)).collect();
            let s = dot(&q, &k);
            let sr = dot(&r.rotate(&q).unwrap(), &r.rotate(&k).unwrap());
            assert!((s - sr).abs() <= 1e-12 * s.abs().max(1.0));
            let n = dot(&q, &q);
            let hq = r.rotate(&q).unwrap();
            assert!((dot(&hq, &hq) - n).abs() <= 1e-12 * n);
        }
    }

    #[test]
    fn group_norms_change_but_total_is_preserved() {
        let r = build_rotation(128, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Vec<f64> = (0..128).map(|_| rng.sample(StandardNormal)).collect();
        let hq = r.rotate(&q).unwrap();
        let norms = |v: &[f64]| -> Vec<f64> { v.chunks(32).map(|c| dot(c, c)).collect() };
        let (a, b) = (norms(&q), norms(&hq));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
        let (ta, tb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        assert!((ta - tb).abs() < 1e-10 * ta);
    }

    #[test]
    fn spreads_a_single_outlier_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &m in &[10.0, 30.0, 100.0] {
            let mut maxima: Vec<f64> = (0..31)
                .map(|seed| {
                    let mut x: Vec<f64> = (0..128).map(|_| rng.sample(StandardNormal)).collect();
                    x[17] = m;
                    let hx = build_rotation(128, seed).unwrap().rotate(&x).unwrap();
                    hx.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
                })
                .collect();
            maxima.sort_by(f64::total_cmp);
            assert!(maxima[15] < m, "median max {} vs {m}", maxima[15]);
        }
    }
}
