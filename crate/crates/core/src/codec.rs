//! Low-level byte cursor and error type shared by the wire codecs.
//!
//! All multi-byte integers and floats are big-endian on the wire.

use thiserror::Error;

/// Errors raised while constructing or (de)coding wire values.
#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("shape mismatch: shape implies {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("non-finite value at element {index}")]
    NonFiniteValue { index: usize },

    #[error("truncated input: needed {needed} more bytes, {remaining} remaining")]
    TruncatedInput { needed: usize, remaining: usize },

    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),

    #[error("duplicate key {0:?}")]
    DuplicateKey(String),

    #[error("unknown value tag 0x{0:02x}")]
    UnknownValueTag(u8),
}

/// Forward-only cursor over a byte slice. Every read is bounds-checked and
/// reports exactly how many bytes were missing.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::TruncatedInput {
                needed: n - self.remaining(),
                remaining: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Fails unless the cursor consumed the whole buffer.
    pub fn finish(self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(CodecError::MalformedEncoding(format!(
                "{} trailing bytes after value",
                self.remaining()
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_i64(out: &mut Vec<u8>, v: i64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_be_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_reports_missing_byte_count() {
        let mut r = ByteReader::new(&[0x01, 0x02]);
        assert_eq!(
            r.u32(),
            Err(CodecError::TruncatedInput {
                needed: 2,
                remaining: 2
            })
        );
    }

    #[test]
    fn reader_roundtrips_scalars() {
        let mut buf = Vec::new();
        put_u32(&mut buf, 7);
        put_f64(&mut buf, -1.5);
        let mut r = ByteReader::new(&buf);
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), -1.5);
        assert!(r.finish().is_ok());
    }

    #[test]
    fn finish_rejects_trailing_bytes() {
        let r = ByteReader::new(&[0x00]);
        assert!(matches!(r.finish(), Err(CodecError::MalformedEncoding(_))));
    }
}
