//! Little-endian readers and writers shared by the checkpoint and slice-bundle formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

/// Reader that tracks its byte offset so format errors can point at the failing byte.
pub struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.offset, message: message.into() }
    }

    pub fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(self.error(format!("truncated while reading {what}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let start = self.offset;
        let mut b = [0u8; 4];
        self.bytes(&mut b, "magic")?;
        if &b != expected {
            return Err(Error::Format {
                offset: start,
                message: format!("bad magic {:?}, expected {:?}", b, std::str::from_utf8(expected).unwrap_or("?")),
            });
        }
        Ok(())
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let mut buf = vec![0u8; len];
        self.bytes(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| self.error(format!("{what} is not valid UTF-8")))
    }

    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; count * 4];
        self.bytes(&mut buf, what)?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    /// Succeeds only when the stream has no bytes left.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(self.error("trailing bytes after end of data")),
        }
    }
}

pub fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn put_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn put_f32s<W: Write>(w: &mut W, values: impl Iterator<Item = f32>) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
