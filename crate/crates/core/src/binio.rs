//! Little-endian byte cursor used by every on-disk format in the crate.

use std::fs;
use std::path::Path;

use crate::error::{Error, ParseError, Result};

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    /// Length-prefixed (u8) UTF-8 string.
    pub fn str8(&mut self, s: &str) -> Result<()> {
        let len = u8::try_from(s.len())
            .map_err(|_| Error::contract(format!("string {s:?} longer than 255 bytes")))?;
        self.u8(len);
        self.bytes(s.as_bytes());
        Ok(())
    }

    /// Length-prefixed (u16) UTF-8 string.
    pub fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| Error::contract("string longer than 65535 bytes"))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }

    pub fn len_u32(&mut self, n: usize, what: &str) -> Result<()> {
        let v = u32::try_from(n)
            .map_err(|_| Error::contract(format!("{what} = {n} does not fit in 32 bits")))?;
        self.u32(v);
        Ok(())
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], ParseError> {
        if self.remaining() < n {
            return Err(ParseError::Truncated {
                offset: self.pos,
                context: context.to_string(),
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), ParseError> {
        let offset = self.pos;
        let n = self.remaining().min(4);
        let found = &self.buf[self.pos..self.pos + n];
        if found != expected {
            return Err(ParseError::BadMagic {
                offset,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: found.to_vec(),
            });
        }
        self.pos += 4;
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<(), ParseError> {
        let offset = self.pos;
        let found = self.u32("version")?;
        if found != expected {
            return Err(ParseError::Version {
                offset,
                found,
                expected,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, context: &str) -> Result<u8, ParseError> {
        Ok(self.take(1, context)?[0])
    }

    pub fn u16(&mut self, context: &str) -> Result<u16, ParseError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, context: &str) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, context: &str) -> Result<u64, ParseError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, context: &str) -> Result<f64, ParseError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn utf8(&mut self, len: usize, context: &str) -> Result<String, ParseError> {
        let offset = self.pos;
        let bytes = self.take(len, context)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| ParseError::Invalid {
            offset,
            context: context.to_string(),
            message: e.to_string(),
        })
    }

    pub fn str8(&mut self, context: &str) -> Result<String, ParseError> {
        let len = self.u8(context)? as usize;
        self.utf8(len, context)
    }

    pub fn str16(&mut self, context: &str) -> Result<String, ParseError> {
        let len = self.u16(context)? as usize;
        self.utf8(len, context)
    }

    /// Reads `count` values of `width` bytes each, checking the byte total up front.
    pub fn array<T>(
        &mut self,
        count: usize,
        width: usize,
        context: &str,
        decode: impl Fn(&[u8]) -> T,
    ) -> Result<Vec<T>, ParseError> {
        let bytes = count.checked_mul(width).ok_or_else(|| ParseError::ShapeOverflow {
            offset: self.pos,
            context: context.to_string(),
        })?;
        let raw = self.take(bytes, context)?;
        Ok(raw.chunks_exact(width).map(decode).collect())
    }

    pub fn f64_array(&mut self, count: usize, context: &str) -> Result<Vec<f64>, ParseError> {
        self.array(count, 8, context, |b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32_array(&mut self, count: usize, context: &str) -> Result<Vec<f32>, ParseError> {
        self.array(count, 4, context, |b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u16_array(&mut self, count: usize, context: &str) -> Result<Vec<u16>, ParseError> {
        self.array(count, 2, context, |b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn invalid(&self, offset: usize, context: &str, message: impl Into<String>) -> ParseError {
        ParseError::Invalid {
            offset,
            context: context.to_string(),
            message: message.into(),
        }
    }

    pub fn finish(&self, context: &str) -> Result<(), ParseError> {
        if self.remaining() != 0 {
            return Err(self.invalid(
                self.pos,
                context,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

/// Multiplies shape factors, reporting overflow at `offset`.
pub(crate) fn checked_volume(dims: &[usize], offset: usize, context: &str) -> Result<usize, ParseError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ParseError::ShapeOverflow {
            offset,
            context: context.to_string(),
        })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
