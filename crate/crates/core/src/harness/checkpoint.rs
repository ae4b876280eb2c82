//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LIFTCKPT"            8 bytes
//! version               u32 (= 1)
//! tensor count          u32
//! per tensor:
//!   name length         u32, then UTF-8 name bytes
//!   rows, cols          u64, u64
//!   values              rows·cols f64, row-major
//!   has_state           u8 (0 or 1)
//!   if has_state:
//!     k                 u64
//!     mask positions    k u64, sorted row-major flat indices
//!     step              u64
//!     first moment      k f64
//!     second moment     k f64
//! crc32                 u32 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{LiftError, Result};
use crate::linalg::Matrix;
use crate::masking::Mask;
use crate::optimizer::SparseOptimizerState;

pub const MAGIC: &[u8; 8] = b"LIFTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub matrix: Matrix,
    pub state: Option<SparseOptimizerState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Bytes an optimizer state with budget `k` adds to a tensor record:
/// the k field, k positions, the step counter and two k-vectors of moments.
pub const fn state_record_bytes(k: usize) -> usize {
    8 + 8 * k + 8 + 2 * 8 * k
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(ckpt.tensors.len())
        .map_err(|_| LiftError::Precondition("too many tensors for one checkpoint".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in &ckpt.tensors {
        let name_len = u32::try_from(t.name.len())
            .map_err(|_| LiftError::Precondition(format!("tensor name of {} bytes", t.name.len())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.matrix.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.matrix.cols() as u64).to_le_bytes());
        for v in t.matrix.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &t.state {
            None => out.push(0),
            Some(s) => {
                if s.mask().shape() != t.matrix.shape() {
                    return Err(LiftError::Shape(format!(
                        "state mask for `{}` does not match its matrix",
                        t.name
                    )));
                }
                out.push(1);
                out.extend_from_slice(&(s.mask().k() as u64).to_le_bytes());
                for &p in s.mask().positions() {
                    out.extend_from_slice(&(p as u64).to_le_bytes());
                }
                out.extend_from_slice(&s.step_count().to_le_bytes());
                for v in s.first_moment().iter().chain(s.second_moment()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(LiftError::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| LiftError::Malformed(format!("size {v} does not fit this platform")))
    }

    /// `n` f64 values; checks the length before allocating.
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| LiftError::Malformed(format!("{n} values overflow")))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Errors are checked in this order: magic, version, structure (truncation
/// and malformed fields), then the checksum.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let prefix = &bytes[..bytes.len().min(MAGIC.len())];
    if prefix != &MAGIC[..prefix.len()] {
        return Err(LiftError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 0 };
    r.take(MAGIC.len())?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(LiftError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| LiftError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.usize()?;
        let cols = r.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| LiftError::Malformed(format!("`{name}` has shape {rows}x{cols}")))?;
        let data = r.f64s(n)?;
        let matrix = Matrix::new(rows, cols, data).map_err(|e| LiftError::Malformed(format!("`{name}`: {e}")))?;
        let state = match r.u8()? {
            0 => None,
            1 => {
                let k = r.usize()?;
                let mut positions = Vec::with_capacity(k.min(r.remaining() / 8));
                for _ in 0..k {
                    positions.push(r.usize()?);
                }
                let step = r.u64()?;
                let m = r.f64s(k)?;
                let v = r.f64s(k)?;
                let strictly_sorted = positions.windows(2).all(|w| w[0] < w[1]);
                if !strictly_sorted {
                    return Err(LiftError::Malformed(format!("`{name}` mask positions are not sorted")));
                }
                let mask = Mask::new(rows, cols, positions)
                    .map_err(|e| LiftError::Malformed(format!("`{name}` mask: {e}")))?;
                Some(
                    SparseOptimizerState::from_parts(mask, m, v, step)
                        .map_err(|e| LiftError::Malformed(format!("`{name}` state: {e}")))?,
                )
            }
            flag => return Err(LiftError::Malformed(format!("`{name}` has state flag {flag}"))),
        };
        tensors.push(TensorRecord { name, matrix, state });
    }
    let body_len = r.pos;
    let stored = r.u32()?;
    if r.remaining() != 0 {
        return Err(LiftError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(LiftError::ChecksumMismatch { stored, computed });
    }
    Ok(Checkpoint { tensors })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| LiftError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| LiftError::io(path, e))?;
    decode(&bytes)
}
