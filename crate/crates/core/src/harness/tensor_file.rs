//! JKVT binary tensors.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "JKVT"
//! 4       1           version (1)
//! 5       1           dtype (0 = f32)
//! 6       1           ndim
//! 7       1           reserved (0)
//! 8       8 * ndim    dims, u64 little-endian
//! ...     4 * prod    payload, row-major f32 little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"JKVT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let t = Self { dims, data };
        t.check()?;
        Ok(t)
    }

    fn element_count(dims: &[u64]) -> Result<usize> {
        dims.iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
    }

    fn check(&self) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("{} dims exceed the u8 rank field", self.dims.len())));
        }
        let n = Self::element_count(&self.dims)?;
        if n != self.data.len() {
            return Err(Error::Format(format!(
                "dims {:?} need {n} elements, got {}",
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&[VERSION, DTYPE_F32, self.dims.len() as u8, 0]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
        }
        let ndim = bytes[6] as usize;
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Format("truncated dims".into()));
        }
        let dims: Vec<u64> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let n = Self::element_count(&dims)?;
        let payload = &bytes[dims_end..];
        if Some(payload.len()) != n.checked_mul(4) {
            return Err(Error::Format(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                payload.len(),
                n.saturating_mul(4)
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Stacks equally shaped matrices into a `[n, rows, cols]` tensor.
    pub fn from_matrices(ms: &[&Matrix]) -> Result<Self> {
        let (rows, cols) = ms.first().map_or((0, 0), |m| (m.rows(), m.cols()));
        let mut data = Vec::with_capacity(ms.len() * rows * cols);
        for m in ms {
            if (m.rows(), m.cols()) != (rows, cols) {
                return Err(Error::Format("stacked matrices differ in shape".into()));
            }
            data.extend(m.as_slice().iter().map(|&v| v as f32));
        }
        Self::new(vec![ms.len() as u64, rows as u64, cols as u64], data)
    }

    /// Splits a `[n, rows, cols]` tensor back into matrices.
    pub fn to_matrices(&self) -> Result<Vec<Matrix>> {
        let [n, rows, cols] = self.dims[..] else {
            return Err(Error::Format(format!("expected 3 dims, got {:?}", self.dims)));
        };
        let (n, rows, cols) = (n as usize, rows as usize, cols as usize);
        let stride = rows * cols;
        (0..n)
            .map(|i| {
                let data = self.data[i * stride..(i + 1) * stride]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                Matrix::from_vec(rows, cols, data)
            })
            .collect()
    }
}
