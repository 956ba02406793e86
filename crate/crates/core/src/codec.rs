//! Little-endian byte reading/writing shared by the binary file formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// File offset of `buf[0]`, so errors report absolute byte positions.
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn at(buf: &'a [u8], base: usize) -> Self {
        Reader { buf, pos: 0, base }
    }

    pub fn pos(&self) -> usize {
        self.base + self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.pos(),
                format!("{what}: need {n} bytes, {} remain", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// `count` little-endian f32 values.
    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let n = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos(), format!("{what}: element count overflows")))?;
        let raw = self.bytes(n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Check magic and version, then split off and verify the trailing CRC32.
/// Returns the body after the 6-byte magic+version prefix.
pub(crate) fn framed<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u16) -> Result<&'a [u8]> {
    let checksum_err = || Error::Checksum {
        stored: 0,
        computed: crc32fast::hash(bytes),
    };
    if bytes.len() < 4 {
        return Err(Error::format(0, "file shorter than its magic"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!("missing {} magic", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < 6 {
        return Err(checksum_err());
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::Version(found));
    }
    if bytes.len() < 10 {
        return Err(checksum_err());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(&body[6..])
}

pub(crate) fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    put_u32(&mut body, crc);
    body
}
