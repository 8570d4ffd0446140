use thiserror::Error;

/// Errors raised by quantization, attention, diagnostics and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("code {code} out of range for {bits}-bit quantization")]
    CodeOutOfRange { code: u32, bits: u8 },

    #[error("zero step size with nonzero input {value}")]
    ZeroStep { value: f64 },

    #[error("rotation mismatch: cache written with {cache:?}, query side uses {query:?}")]
    RotationMismatch {
        cache: Option<u64>,
        query: Option<u64>,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("attention row does not sum to one (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("negative probability {0}")]
    NegativeProbability(f64),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}

pub(crate) fn ensure_finite(what: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
