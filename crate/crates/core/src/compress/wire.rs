//! Little-endian wire format for [`FactorizedGradient`].
//!
//! ```text
//! header: magic "FKDG" | version u16 | entry_count u32
//! entry:  name_len u16 | name utf-8 | kind u8 (0 raw, 1 factorized)
//!         | P u32 | Q u32 | K u32 (0 if raw) | payload f64...
//! ```
//!
//! Raw payloads carry `P*Q` values row-major. Factorized payloads carry `U`
//! (`P x K`, row-major), then the `K` singular values, then `V` (`K x Q`,
//! row-major).

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{FactorizedEntry, FactorizedGradient, Payload};

pub const MAGIC: &[u8; 4] = b"FKDG";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4;

const KIND_RAW: u8 = 0;
const KIND_FACTORIZED: u8 = 1;

pub(crate) fn entry_overhead(name: &str) -> usize {
    2 + name.len() + 1 + 4 + 4 + 4
}

/// Exact length of [`encode`]'s output, computed from metadata alone.
pub fn encoded_len(fg: &FactorizedGradient) -> usize {
    HEADER_LEN
        + fg
            .entries
            .iter()
            .map(|e| entry_overhead(&e.name) + 8 * e.float_count())
            .sum::<usize>()
}

pub fn encode(fg: &FactorizedGradient) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(fg));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(fg.entries.len() as u32).to_le_bytes());
    for e in &fg.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let (p, q) = e.orig_shape;
        let (kind, k) = match &e.payload {
            Payload::Raw(_) => (KIND_RAW, 0),
            Payload::Factorized { sigma, .. } => (KIND_FACTORIZED, sigma.len()),
        };
        out.push(kind);
        for d in [p, q, k] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        match &e.payload {
            Payload::Raw(m) => put(m.data()),
            Payload::Factorized { u, sigma, v } => {
                put(u.data());
                put(sigma);
                put(v.data());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Wire(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Wire("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.floats(rows * cols)?)
    }
}

pub fn decode(bytes: &[u8]) -> Result<FactorizedGradient> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Wire(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Wire(format!("entry name: {e}")))?
            .to_string();
        let kind = c.u8()?;
        let p = c.u32()? as usize;
        let q = c.u32()? as usize;
        let k = c.u32()? as usize;
        let payload = match kind {
            KIND_RAW if k == 0 => Payload::Raw(c.matrix(p, q)?),
            KIND_FACTORIZED if k >= 1 && k <= p.min(q) => {
                let u = c.matrix(p, k)?;
                let sigma = c.floats(k)?;
                let v = c.matrix(k, q)?;
                Payload::Factorized { u, sigma, v }
            }
            _ => {
                return Err(Error::Wire(format!(
                    "entry {name}: invalid kind {kind} with rank {k} for {p}x{q}"
                )))
            }
        };
        entries.push(FactorizedEntry {
            name,
            orig_shape: (p, q),
            payload,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Wire(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(FactorizedGradient { entries })
}
