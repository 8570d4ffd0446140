//! Jensen-bias correction of cached attention scores.
//!
//! A cached key reconstructed with per-channel step sizes `delta_c` carries
//! uniform rounding noise, so its score `q.k / sqrt(d)` picks up zero-mean
//! noise whose exponential is biased upwards. Subtracting
//! `b = log E[exp(noise)]` from the score makes the exponentiated score
//! unbiased again. With `alpha_c = q_c * delta_c / (2 sqrt(d))`:
//!
//! * exact:   `b = sum_c log(sinh(alpha_c) / alpha_c)`
//! * Taylor:  `b = (1 / 24d) * sum_c q_c^2 delta_c^2`, half the score-noise variance
//! * grouped: `b = (1 / 24d) * sum_j delta_j^2 * ||q_j||^2` when step sizes are
//!   shared within groups of channels.
//!
//! When keys are rotated before quantization the correction must be fed the
//! rotated query.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    None,
    Exact,
    Taylor,
    PerChannelTaylor,
}

impl CorrectionMode {
    pub const ALL: [CorrectionMode; 4] = [
        CorrectionMode::None,
        CorrectionMode::Exact,
        CorrectionMode::Taylor,
        CorrectionMode::PerChannelTaylor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionMode::None => "none",
            CorrectionMode::Exact => "exact",
            CorrectionMode::Taylor => "taylor",
            CorrectionMode::PerChannelTaylor => "per-channel-taylor",
        }
    }
}

impl std::fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CorrectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CorrectionMode::None),
            "exact" => Ok(CorrectionMode::Exact),
            "taylor" => Ok(CorrectionMode::Taylor),
            "per-channel" | "per-channel-taylor" => Ok(CorrectionMode::PerChannelTaylor),
            other => Err(Error::InvalidConfig(format!(
                "unknown correction mode {other:?}"
            ))),
        }
    }
}

/// Which closed form [`per_channel_correction`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerChannelForm {
    Exact,
    Taylor,
}

/// Below this `|alpha|` the power series is used instead of the closed form.
pub const SERIES_SWITCH: f64 = 0.1;

/// `log(sinh(a) / a)`, finite for every finite `a`.
///
/// Small arguments use the series `a^2/6 - a^4/180 + a^6/2835 - a^8/37800`
/// (truncation error below `a^10 / 467775`). Larger ones use
/// `a + log(1 - exp(-2a)) - log(2a)`, which never evaluates `sinh`.
pub fn log_sinhc(alpha: f64) -> f64 {
    let a = alpha.abs();
    if a < SERIES_SWITCH {
        let a2 = a * a;
        a2 * (1.0 / 6.0 + a2 * (-1.0 / 180.0 + a2 * (1.0 / 2835.0 - a2 / 37800.0)))
    } else {
        a + (-(-2.0 * a).exp_m1()).ln() - (2.0 * a).ln()
    }
}

fn check_inputs(q: &[f64], deltas: &[f64], d: usize) -> Result<()> {
    ensure_len("query", d, q.len())?;
    ensure_len("step sizes", d, deltas.len())?;
    ensure_finite("query", q)?;
    ensure_finite("step sizes", deltas)?;
    if let Some(&neg) = deltas.iter().find(|&&x| x < 0.0) {
        return Err(Error::InvalidConfig(format!("negative step size {neg}")));
    }
    Ok(())
}

/// `sum_c log(sinh(alpha_c) / alpha_c)` with `alpha_c = q_c delta_c / (2 sqrt(d))`.
pub fn exact_correction(q: &[f64], deltas: &[f64], d: usize) -> Result<f64> {
    check_inputs(q, deltas, d)?;
    Ok(exact_unchecked(q, deltas, d))
}

pub(crate) fn exact_unchecked(q: &[f64], deltas: &[f64], d: usize) -> f64 {
    let half_inv_sqrt_d = 0.5 / (d as f64).sqrt();
    q.iter()
        .zip(deltas)
        .map(|(&qc, &dc)| log_sinhc(qc * dc * half_inv_sqrt_d))
        .sum()
}

/// `(1 / 24d) * sum_c q_c^2 delta_c^2`.
pub fn taylor_correction(q: &[f64], deltas: &[f64], d: usize) -> Result<f64> {
    check_inputs(q, deltas, d)?;
    Ok(taylor_unchecked(q, deltas, d))
}

pub(crate) fn taylor_unchecked(q: &[f64], deltas: &[f64], d: usize) -> f64 {
    weighted_square_sum(q, deltas) / (24.0 * d as f64)
}

/// Score-space noise variance `(1 / 12d) * sum_c q_c^2 delta_c^2` under the
/// uniform rounding-noise model.
pub fn score_noise_variance(q: &[f64], deltas: &[f64], d: usize) -> Result<f64> {
    check_inputs(q, deltas, d)?;
    Ok(weighted_square_sum(q, deltas) / (12.0 * d as f64))
}

fn weighted_square_sum(q: &[f64], deltas: &[f64]) -> f64 {
    q.iter()
        .zip(deltas)
        .map(|(&qc, &dc)| {
            let t = qc * dc;
            t * t
        })
        .sum()
}

/// Per-group squared query norms `||q_j||^2` for groups of `g` channels.
pub fn query_group_norms(q: &[f64], g: usize) -> Result<Vec<f64>> {
    if g == 0 || !q.len().is_multiple_of(g) {
        return Err(Error::InvalidConfig(format!(
            "group size {g} does not divide query length {}",
            q.len()
        )));
    }
    Ok(q.chunks_exact(g).map(|c| c.iter().map(|x| x * x).sum()).collect())
}

/// `(1 / 24d) * sum_j delta_j^2 * ||q_j||^2`.
pub fn grouped_taylor_correction(
    q_group_norms: &[f64],
    group_deltas: &[f64],
    d: usize,
) -> Result<f64> {
    ensure_len("group step sizes", q_group_norms.len(), group_deltas.len())?;
    if q_group_norms.is_empty() || !d.is_multiple_of(q_group_norms.len()) {
        return Err(Error::DimensionMismatch {
            what: "group count (must divide d)",
            expected: d,
            actual: q_group_norms.len(),
        });
    }
    ensure_finite("group norms", q_group_norms)?;
    ensure_finite("group step sizes", group_deltas)?;
    Ok(grouped_from_squares(q_group_norms, group_deltas.iter().map(|x| x * x), d))
}

/// Shared kernel of the grouped Taylor form. The attention engine calls this
/// with precomputed squared step sizes so both paths agree bit for bit.
#[inline]
pub(crate) fn grouped_from_squares(
    norms: &[f64],
    delta_sq: impl IntoIterator<Item = f64>,
    d: usize,
) -> f64 {
    let mut acc = 0.0;
    for (n, dsq) in norms.iter().zip(delta_sq) {
        acc += dsq * n;
    }
    acc / (24.0 * d as f64)
}

/// One correction shared by all cached tokens when step sizes depend only on
/// the channel.
pub fn per_channel_correction(
    q: &[f64],
    channel_deltas: &[f64],
    d: usize,
    form: PerChannelForm,
) -> Result<f64> {
    match form {
        PerChannelForm::Exact => exact_correction(q, channel_deltas, d),
        PerChannelForm::Taylor => taylor_correction(q, channel_deltas, d),
    }
}

/// `(log(sinh(a)/a), a^2/6)` for each `a`.
pub fn exact_vs_taylor_curve(alphas: &[f64]) -> Vec<(f64, f64)> {
    alphas
        .iter()
        .map(|&a| (log_sinhc(a), a * a / 6.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // log(sinh(1)) from sinh(1) = 1.1752011936438014568823818505956...
    const LOG_SINH_1: f64 = 0.161_439_361_571_195_5;

    /// Independent reference: naive formula evaluated where it is accurate,
    /// plus a long series for tiny arguments.
    fn log_sinhc_reference(a: f64) -> f64 {
        let a = a.abs();
        if a == 0.0 {
            0.0
        } else if a < 0.5 {
            // Bernoulli series through a^14
            let c = [
                1.0 / 6.0,
                -1.0 / 180.0,
                1.0 / 2835.0,
                -1.0 / 37800.0,
                1.0 / 467775.0,
                -691.0 / 3831077250.0,
                2.0 / 127702575.0,
            ];
            let a2 = a * a;
            c.iter().rev().fold(0.0, |acc, &k| acc * a2 + k) * a2
        } else if a < 300.0 {
            (a.sinh() / a).ln()
        } else {
            a - (2.0 * a).ln()
        }
    }

    #[test]
    fn series_coefficient_check() {
        // 2^{2n} B_{2n} / (2n (2n)!) for n = 6, 7
        let c6: f64 = 4096.0 * (-691.0 / 2730.0) / (12.0 * 479_001_600.0);
        let c7: f64 = 16384.0 * (7.0 / 6.0) / (14.0 * 87_178_291_200.0);
        assert!((c6 - (-691.0 / 3831077250.0)).abs() < 1e-20);
        assert!((c7 - 2.0 / 127702575.0).abs() < 1e-22);
    }

    #[test]
    fn log_sinhc_matches_reference() {
        let mut a = 1e-8;
        while a < 700.0 {
            let got = log_sinhc(a);
            let want = log_sinhc_reference(a);
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1e-300),
                "a = {a}: {got} vs {want}"
            );
            a *= 1.07;
        }
        assert_eq!(log_sinhc(0.0), 0.0);
        assert!(log_sinhc(1e6).is_finite());
        assert!((log_sinhc(1.0) - LOG_SINH_1).abs() < 1e-15);
    }

    #[test]
    fn exact_examples() {
        assert_eq!(exact_correction(&[3.0, -1.0], &[0.0, 0.0], 2).unwrap(), 0.0);
        // d = 1, q = 2, delta = 1 gives alpha = 1
        let b = exact_correction(&[2.0], &[1.0], 1).unwrap();
        assert!((b - LOG_SINH_1).abs() < 1e-15);
        let q = [0.3, -1.2, 2.0, 0.7];
        let dl = [0.5, 1.5, 0.25, 2.0];
        let neg: Vec<f64> = q.iter().map(|x| -x).collect();
        assert_eq!(
            exact_correction(&q, &dl, 4).unwrap(),
            exact_correction(&neg, &dl, 4).unwrap()
        );
    }

    #[test]
    fn taylor_examples() {
        assert_eq!(taylor_correction(&[5.0], &[0.0], 1).unwrap(), 0.0);
        let b = taylor_correction(&[2.0], &[1.0], 1).unwrap();
        assert!((b - 4.0 / 24.0).abs() < 1e-16);
        assert_eq!(score_noise_variance(&[2.0], &[0.0], 1).unwrap(), 0.0);
        assert!((score_noise_variance(&[2.0], &[1.0], 1).unwrap() - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn input_errors() {
        assert!(exact_correction(&[1.0], &[1.0, 2.0], 1).is_err());
        assert!(exact_correction(&[f64::NAN], &[1.0], 1).is_err());
        assert!(taylor_correction(&[1.0], &[-1.0], 1).is_err());
        assert!(grouped_taylor_correction(&[1.0, 2.0], &[1.0], 4).is_err());
        assert!(grouped_taylor_correction(&[1.0, 2.0, 3.0], &[1.0; 3], 4).is_err());
        assert!(query_group_norms(&[1.0; 6], 4).is_err());
    }

    #[test]
    fn grouped_examples() {
        // g = d, delta = 1, ||q||^2 = 24 d
        let d = 8;
        assert_eq!(grouped_taylor_correction(&[24.0 * d as f64], &[1.0], d).unwrap(), 1.0);
        assert_eq!(grouped_taylor_correction(&[3.0, 4.0], &[0.0, 0.0], 4).unwrap(), 0.0);
    }

    #[test]
    fn per_channel_examples() {
        let q = [0.5, -2.0, 1.0, 3.0];
        let dl = [0.2, 0.4, 1.0, 0.1];
        assert_eq!(
            per_channel_correction(&q, &dl, 4, PerChannelForm::Exact).unwrap(),
            exact_correction(&q, &dl, 4).unwrap()
        );
        assert_eq!(
            per_channel_correction(&q, &dl, 4, PerChannelForm::Taylor).unwrap(),
            taylor_correction(&q, &dl, 4).unwrap()
        );
        assert_eq!(
            per_channel_correction(&q, &[0.0; 4], 4, PerChannelForm::Exact).unwrap(),
            0.0
        );
        let doubled: Vec<f64> = dl.iter().map(|x| 2.0 * x).collect();
        let t1 = per_channel_correction(&q, &dl, 4, PerChannelForm::Taylor).unwrap();
        let t2 = per_channel_correction(&q, &doubled, 4, PerChannelForm::Taylor).unwrap();
        assert!((t2 - 4.0 * t1).abs() < 1e-15 * t2);
    }

    #[test]
    fn curve_examples() {
        let c = exact_vs_taylor_curve(&[0.0, 1.0, 5.0]);
        assert_eq!(c[0], (0.0, 0.0));
        assert!((c[1].0 - LOG_SINH_1).abs() < 1e-15);
        assert!((c[1].1 - 1.0 / 6.0).abs() < 1e-16);
        assert!(c[1].1 > c[1].0);
        let want5 = 5.0 + (1.0 - (-10.0_f64).exp()).ln() - 10.0_f64.ln();
        assert!((c[2].0 - want5).abs() < 1e-13);
        assert!((c[2].0 - 2.697).abs() < 1e-3);
        assert!((c[2].1 - 25.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn mode_parsing() {
        for m in CorrectionMode::ALL {
            assert_eq!(m.as_str().parse::<CorrectionMode>().unwrap(), m);
        }
        assert_eq!(
            "per-channel".parse::<CorrectionMode>().unwrap(),
            CorrectionMode::PerChannelTaylor
        );
        assert!("bogus".parse::<CorrectionMode>().is_err());
    }

    fn qd(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(0.0f64..4.0, d),
        )
    }

    proptest! {
        #[test]
        fn nonnegative_and_dominated((q, dl) in qd(16)) {
            let e = exact_correction(&q, &dl, 16).unwrap();
            let t = taylor_correction(&q, &dl, 16).unwrap();
            prop_assert!(e >= 0.0);
            prop_assert!(t >= e);
        }

        #[test]
        fn cgf_identity((q, dl) in qd(32)) {
            let t = taylor_correction(&q, &dl, 32).unwrap();
            let v = score_noise_variance(&q, &dl, 32).unwrap();
            prop_assert!((t - v / 2.0).abs() <= 1e-12 * t.abs());
        }

        #[test]
        fn monotone_in_noise((q, dl) in qd(8), lambda in 1.0f64..5.0) {
            let scaled: Vec<f64> = dl.iter().map(|x| x * lambda).collect();
            prop_assert!(exact_correction(&q, &scaled, 8).unwrap() >= exact_correction(&q, &dl, 8).unwrap());
            prop_assert!(taylor_correction(&q, &scaled, 8).unwrap() >= taylor_correction(&q, &dl, 8).unwrap());
        }

        #[test]
        fn even_and_permutation_invariant((q, dl) in qd(8), rot in 0usize..8) {
            let neg: Vec<f64> = q.iter().map(|x| -x).collect();
            prop_assert_eq!(exact_correction(&q, &dl, 8).unwrap(), exact_correction(&neg, &dl, 8).unwrap());
            let mut qp = q.clone();
            let mut dp = dl.clone();
            qp.rotate_left(rot);
            dp.rotate_left(rot);
            let a = exact_correction(&q, &dl, 8).unwrap();
            let b = exact_correction(&qp, &dp, 8).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }

        #[test]
        fn grouped_equals_expanded(
            q in prop::collection::vec(-5.0f64..5.0, 32),
            gd in prop::collection::vec(0.0f64..3.0, 4),
        ) {
            let expanded: Vec<f64> = (0..32).map(|c| gd[c / 8]).collect();
            let norms = query_group_norms(&q, 8).unwrap();
            let a = grouped_taylor_correction(&norms, &gd, 32).unwrap();
            let b = taylor_correction(&q, &expanded, 32).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
        }
    }
}
