//! Atomic file output and the shared binary framing used by teacher artifacts
//! and student checkpoints:
//!
//! ```text
//! magic (8 bytes) | header_len: u32 LE | JSON header | payload | CRC32 (IEEE, LE) over all preceding bytes
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes through a temp file in the destination directory, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn frame(magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + header.len() + payload.len() + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Checks magic, length and CRC; returns `(header, payload)` slices.
pub fn unframe<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        let found = &bytes[..bytes.len().min(8)];
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            needed: 16,
            actual: bytes.len(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let needed = 12usize.saturating_add(header_len).saturating_add(4);
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            actual: bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    Ok((&body[12..12 + header_len], &body[12 + header_len..]))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a payload; running past the end is a truncation error.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                needed: end,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Validation(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TEST-FR1";

    #[test]
    fn frame_roundtrip() {
        let bytes = frame(MAGIC, b"{\"a\":1}", &[1, 2, 3]);
        let (h, p) = unframe(MAGIC, &bytes).unwrap();
        assert_eq!(h, b"{\"a\":1}");
        assert_eq!(p, &[1, 2, 3]);
    }

    #[test]
    fn every_single_byte_corruption_is_caught() {
        let bytes = frame(MAGIC, b"{\"k\":\"v\"}", &[9; 40]);
        for i in 0..bytes.len() {
            for flip in [0x01u8, 0x80, 0xFF] {
                let mut bad = bytes.clone();
                bad[i] ^= flip;
                assert!(unframe(MAGIC, &bad).is_err(), "byte {i} flip {flip:#x}");
            }
        }
    }

    #[test]
    fn truncation_reported() {
        let bytes = frame(MAGIC, b"{}", &[0; 10]);
        assert!(matches!(
            unframe(MAGIC, &bytes[..12]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            unframe(MAGIC, &bytes[..bytes.len() - 3]),
            Err(Error::CrcMismatch { .. })
        ));
        assert!(matches!(
            unframe(MAGIC, b"NOPE"),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
