use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ValuePrecision;
use crate::correction::CorrectionMode;
use crate::error::{Error, Result};
use crate::quant::QuantSpec;

/// Key channels scaled up to emulate activation outliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierConfig {
    pub channels: usize,
    pub magnitude: f64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            magnitude: 10.0,
        }
    }
}

/// Synthetic workload and run configuration.
///
/// `score_scale` multiplies the queries, so reference scores are roughly
/// `N(0, score_scale^2)` before outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Queries per head.
    pub queries: usize,
    /// Cached tokens per head (the quantized block).
    pub cached: usize,
    /// Current tokens per head (the full-precision block).
    pub current: usize,
    pub d: usize,
    pub d_v: usize,
    pub heads: usize,
    pub score_scale: f64,
    pub outliers: OutlierConfig,
    /// Tokens per cache write. Per-channel scales are shared within a chunk.
    pub chunk_tokens: usize,
    pub seed: u64,
    pub spec: QuantSpec,
    pub mode: CorrectionMode,
    pub value_precision: ValuePrecision,
}

/// Calibrated on the default sizes: the reference cached mass stays near the
/// token share 2/3 (median 0.67 over seeds 0..3) while INT2 with rotation
/// shifts it by a median of about 0.06 before correction.
pub const DEFAULT_SCORE_SCALE: f64 = 1.5;

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            queries: 64,
            cached: 512,
            current: 256,
            d: 128,
            d_v: 128,
            heads: 4,
            score_scale: DEFAULT_SCORE_SCALE,
            outliers: OutlierConfig::default(),
            chunk_tokens: 64,
            seed: 0,
            spec: QuantSpec::default(),
            mode: CorrectionMode::Taylor,
            value_precision: ValuePrecision::Quantized,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("queries", self.queries),
            ("current", self.current),
            ("d", self.d),
            ("d_v", self.d_v),
            ("heads", self.heads),
            ("chunk_tokens", self.chunk_tokens),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(self.score_scale.is_finite() && self.score_scale >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "score_scale must be finite and nonnegative, got {}",
                self.score_scale
            )));
        }
        if self.outliers.channels > self.d {
            return Err(Error::InvalidConfig(format!(
                "{} outlier channels exceed d = {}",
                self.outliers.channels, self.d
            )));
        }
        if !self.outliers.magnitude.is_finite() {
            return Err(Error::InvalidConfig("outlier magnitude must be finite".into()));
        }
        if self.spec.rotation && !self.d.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "rotation needs a power-of-two d, got {}",
                self.d
            )));
        }
        self.spec.validate(self.d)?;
        if self.value_precision == ValuePrecision::Quantized {
            self.spec.validate(self.d_v)?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}
