//! Byte-level encoding helpers for the binary artifact formats.
//!
//! All formats are little-endian. Readers validate lengths before allocating,
//! so a truncated or hostile header can never trigger an oversized allocation:
//! every array read is bounds-checked against the bytes actually present.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

impl FormatError {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        FormatError::InvalidField {
            field,
            reason: reason.into(),
        }
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let got = self.take(4)?;
        let found = [got[0], got[1], got[2], got[3]];
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<(), FormatError> {
        let found = self.u32()?;
        if found != supported {
            return Err(FormatError::UnsupportedVersion { found, supported });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u32_vec(&mut self, len: usize) -> Result<Vec<u32>, FormatError> {
        let nbytes = len
            .checked_mul(4)
            .ok_or_else(|| FormatError::invalid("length", "u32 array size overflows"))?;
        let b = self.take(nbytes)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f32_vec(&mut self, len: usize) -> Result<Vec<f32>, FormatError> {
        let nbytes = len
            .checked_mul(4)
            .ok_or_else(|| FormatError::invalid("length", "f32 array size overflows"))?;
        let b = self.take(nbytes)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f64_vec(&mut self, len: usize) -> Result<Vec<f64>, FormatError> {
        let nbytes = len
            .checked_mul(8)
            .ok_or_else(|| FormatError::invalid("length", "f64 array size overflows"))?;
        let b = self.take(nbytes)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self, len: usize) -> Result<&'a [u8], FormatError> {
        self.take(len)
    }

    /// The payload must be fully consumed; anything left over is an error.
    pub fn finish(self) -> Result<(), FormatError> {
        if self.remaining() != 0 {
            return Err(FormatError::TrailingBytes(self.remaining()));
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn magic(&mut self, m: [u8; 4]) -> &mut Self {
        self.buf.extend_from_slice(&m);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32_slice(&mut self, vs: &[u32]) -> &mut Self {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn f32_slice(&mut self, vs: &[f32]) -> &mut Self {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn f64_iter(&mut self, vs: impl IntoIterator<Item = f64>) -> &mut Self {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_scalars() {
        let mut w = Writer::new();
        w.magic(*b"TEST").u32(7).f64(1.5).u32_slice(&[1, 2, 3]);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        r.magic(*b"TEST").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), 1.5);
        assert_eq!(r.u32_vec(3).unwrap(), vec![1, 2, 3]);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = b"TES";
        let mut r = Reader::new(bytes);
        assert!(matches!(
            r.magic(*b"TEST"),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn oversized_header_does_not_allocate() {
        // a header claiming u32::MAX elements against a 4-byte buffer
        let bytes = [0u8; 4];
        let mut r = Reader::new(&bytes);
        assert!(matches!(
            r.f32_vec(u32::MAX as usize),
            Err(FormatError::Truncated { .. })
        ));
    }
}
