//! Versioned, length-prefixed binary layout for parameter bundles.
//!
//! ```text
//! magic "HYDP" | version u32 | count u32 |
//!   count x ( name_len u32 | name utf8 | ndims u32 | dims u64 x ndims | values f64 x prod(dims) )
//! ```
//! All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::numkit::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"HYDP";
pub const VERSION: u32 = 1;

pub fn encode_params(set: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + set.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.names().iter().zip(set.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated parameter blob at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a blob; returns the set and the number of bytes consumed.
pub fn decode_params(buf: &[u8]) -> Result<(ParamSet, usize)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad parameter blob magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported parameter blob version {version}")));
    }
    let count = r.u32()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        set.push(name, Tensor::new(shape, data)?);
    }
    Ok((set, r.pos))
}
