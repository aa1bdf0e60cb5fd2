//! Binary checkpoint plumbing shared by model and prompt files.
//!
//! Everything is little-endian; tensor payloads are raw 64-bit floats. Each
//! file ends with a 64-bit FNV-1a digest of all tensor bytes in written
//! order, which doubles as the frozen-model identity.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a {
    pub fn new() -> Self {
        Self(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.finish()
}

pub(crate) struct CheckpointWriter<W> {
    inner: W,
    digest: Fnv1a,
}

impl<W: Write> CheckpointWriter<W> {
    pub fn new(inner: W) -> Self {
        Self {
            inner,
            digest: Fnv1a::new(),
        }
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_all(&[v])?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        Ok(self.inner.write_all(s.as_bytes())?)
    }

    /// Tensor payload bytes feed the running digest.
    pub fn tensor_data(&mut self, values: impl Iterator<Item = f64>) -> Result<()> {
        for v in values {
            let bytes = v.to_le_bytes();
            self.digest.update(&bytes);
            self.inner.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Writes the accumulated digest trailer and returns it.
    pub fn finish(mut self) -> Result<u64> {
        let digest = self.digest.finish();
        self.inner.write_all(&digest.to_le_bytes())?;
        Ok(digest)
    }
}

pub(crate) struct CheckpointReader<R> {
    inner: R,
    digest: Fnv1a,
}

impl<R: Read> CheckpointReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            digest: Fnv1a::new(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("file truncated".into()))?;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible string length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("file truncated".into()))?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    pub fn tensor_data(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let bytes = self.bytes::<8>()?;
            self.digest.update(&bytes);
            out.push(f64::from_le_bytes(bytes));
        }
        Ok(out)
    }

    /// Reads the digest trailer and verifies it against the bytes seen.
    pub fn verify_digest(mut self) -> Result<u64> {
        let stored = self.u64()?;
        let computed = self.digest.finish();
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "digest mismatch: stored {stored:016x}, computed {computed:016x}"
            )));
        }
        Ok(stored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_values() {
        // standard FNV-1a test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn writer_reader_roundtrip_with_digest() {
        let mut buf = Vec::new();
        let mut w = CheckpointWriter::new(&mut buf);
        w.u32(7).unwrap();
        w.string("hello").unwrap();
        w.tensor_data([1.5f64, -2.25].into_iter()).unwrap();
        let digest = w.finish().unwrap();

        let mut r = CheckpointReader::new(buf.as_slice());
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.string().unwrap(), "hello");
        assert_eq!(r.tensor_data(2).unwrap(), vec![1.5, -2.25]);
        assert_eq!(r.verify_digest().unwrap(), digest);
    }

    #[test]
    fn corrupted_payload_fails_verification() {
        let mut buf = Vec::new();
        let mut w = CheckpointWriter::new(&mut buf);
        w.tensor_data([1.0f64].into_iter()).unwrap();
        w.finish().unwrap();
        buf[0] ^= 0xff;
        let mut r = CheckpointReader::new(buf.as_slice());
        r.tensor_data(1).unwrap();
        assert!(r.verify_digest().is_err());
    }
}
