//! The `MPSF` feature-bank container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MPSF" | version: u32 | count: u32 |
//!   count × ( name_len: u16 | name: UTF-8 | rank: u8 | extents: u32 × rank | values: f32 × ∏extents )
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MPSF";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
pub type FeatureBank<T> = Vec<(String, Tensor<T>)>;

/// Serializes a bank. Values are stored in single precision.
pub fn encode_bank<T: Scalar>(bank: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(bank.len()).map_err(|_| Error::Argument("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in bank {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("entry {name:?} holds non-finite values")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::Argument(format!("name too long: {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Argument(format!("rank too large for {name:?}")))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Argument(format!("extent too large in {name:?}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            offset: self.pos,
            reason: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a bank, widening values to `T`.
pub fn decode_bank<T: Scalar>(buf: &[u8]) -> Result<FeatureBank<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, reason: "bad magic".into() });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: version_at, reason: format!("unsupported version {version}") });
    }
    let count = r.u32("entry count")?;
    let mut bank = Vec::new();
    for _ in 0..count {
        let name_at = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| Error::Format { offset: name_at + 2, reason: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.take(1, "rank")?[0];
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let at = r.pos;
            let e = r.u32("extent")? as usize;
            if e == 0 {
                return Err(Error::Format { offset: at, reason: format!("zero extent in {name:?}") });
            }
            numel = numel
                .checked_mul(e)
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Format { offset: at, reason: format!("dimension overflow in {name:?}") })?;
            shape.push(e);
        }
        let values_at = r.pos;
        if numel * 4 > buf.len() - values_at {
            return Err(Error::Format {
                offset: values_at,
                reason: format!("truncated payload of {name:?}: need {} bytes, {} left", numel * 4, buf.len() - values_at),
            });
        }
        let raw = r.take(numel * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        bank.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format { offset: r.pos, reason: "trailing bytes".into() });
    }
    Ok(bank)
}

pub fn save_features<T: Scalar>(path: impl AsRef<Path>, bank: &[(String, Tensor<T>)]) -> Result<()> {
    fs::write(path, encode_bank(bank)?)?;
    Ok(())
}

pub fn load_features<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureBank<T>> {
    decode_bank(&fs::read(path)?)
}

/// Looks up an entry by name.
pub fn entry<'a, T>(bank: &'a [(String, Tensor<T>)], name: &str) -> Result<&'a Tensor<T>> {
    bank.iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Config(format!("missing entry {name:?}")))
}

/// Stores UTF-8 text as a byte-per-value vector entry.
pub fn text_entry<T: Scalar>(name: &str, text: &str) -> (String, Tensor<T>) {
    let bytes: Vec<T> = text.bytes().map(|b| T::lit(f64::from(b))).collect();
    let t = if bytes.is_empty() { Tensor::vector(&[T::zero()]) } else { Tensor::vector(&bytes) };
    (name.to_string(), t)
}

/// Inverse of [`text_entry`].
pub fn read_text_entry<T: Scalar>(bank: &[(String, Tensor<T>)], name: &str) -> Result<String> {
    let bytes: Vec<u8> = entry(bank, name)?
        .data()
        .iter()
        .map(|v| v.as_f64() as u8)
        .filter(|&b| b != 0)
        .collect();
    String::from_utf8(bytes).map_err(|_| Error::Config(format!("entry {name:?} is not UTF-8 text")))
}
