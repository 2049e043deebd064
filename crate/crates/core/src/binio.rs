//! Little-endian binary framing shared by the cache, tokenisation and checkpoint files.
//!
//! Every file is `magic (4 bytes) | version (u32) | body | sha256(magic..body)`.

use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },
    #[error("checksum mismatch")]
    Checksum,
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub struct BinWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        BinWriter {
            inner,
            hasher: Sha256::new(),
        }
    }

    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.hasher.update(b);
        self.inner.write_all(b)
    }

    pub fn header(&mut self, magic: [u8; 4], version: u32) -> io::Result<()> {
        self.bytes(&magic)?;
        self.u32(version)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    /// Appends the checksum trailer and flushes.
    pub fn finish(mut self) -> io::Result<W> {
        let digest = self.hasher.finalize();
        self.inner.write_all(&digest)?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct BinReader<R: Read> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R) -> Self {
        BinReader {
            inner,
            hasher: Sha256::new(),
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                FormatError::Corrupt("truncated file".into())
            } else {
                FormatError::Io(e)
            }
        })?;
        self.hasher.update(&*buf);
        Ok(())
    }

    pub fn header(&mut self, magic: [u8; 4], version: u32) -> Result<(), FormatError> {
        let mut found = [0u8; 4];
        self.fill(&mut found)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                found,
            });
        }
        let v = self.u32()?;
        if v != version {
            return Err(FormatError::BadVersion {
                expected: version,
                found: v,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// A u64 length field that must fit in memory.
    pub fn len_u64(&mut self) -> Result<usize, FormatError> {
        let v = self.u64()?;
        if v > (1u64 << 40) {
            return Err(FormatError::Corrupt(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    /// Verifies the checksum trailer and that nothing follows it.
    pub fn finish(mut self) -> Result<(), FormatError> {
        let expected = self.hasher.finalize();
        let mut trailer = [0u8; 32];
        self.inner
            .read_exact(&mut trailer)
            .map_err(|_| FormatError::Corrupt("missing checksum".into()))?;
        if trailer[..] != expected[..] {
            return Err(FormatError::Checksum);
        }
        let mut rest = [0u8; 1];
        if self.inner.read(&mut rest)? != 0 {
            return Err(FormatError::Corrupt("trailing bytes after checksum".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a byte slice, used for manifests and fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes `bytes` to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut w = BinWriter::new(Vec::new());
        w.header(*b"TEST", 3).unwrap();
        w.u64(7).unwrap();
        w.f32(1.5).unwrap();
        w.finish().unwrap()
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let mut r = BinReader::new(&bytes[..]);
        r.header(*b"TEST", 3).unwrap();
        assert_eq!(r.u64().unwrap(), 7);
        assert_eq!(r.f32().unwrap(), 1.5);
        r.finish().unwrap();
    }

    #[test]
    fn detects_corruption_and_version() {
        let mut bytes = sample();
        bytes[9] ^= 1;
        let mut r = BinReader::new(&bytes[..]);
        r.header(*b"TEST", 3).unwrap();
        r.u64().unwrap();
        r.f32().unwrap();
        assert!(matches!(r.finish(), Err(FormatError::Checksum)));

        let bytes = sample();
        let mut r = BinReader::new(&bytes[..]);
        assert!(matches!(r.header(*b"TEST", 4), Err(FormatError::BadVersion { .. })));
        let mut r = BinReader::new(&bytes[..]);
        assert!(matches!(r.header(*b"NOPE", 3), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert!(!dir.path().join("x.bin.tmp").exists());
    }
}
