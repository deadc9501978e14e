//! Versioned binary container for checkpoints, graph embeddings and
//! memory banks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "TRLMBIN1"
//! meta    u64 length + JSON bytes
//! count   u64 number of sections
//! section u16 name length, name bytes, u64 rows, u64 cols,
//!         rows*cols little-endian f64
//! check   u64 FNV-1a over everything before it
//! ```
//!
//! Floats round-trip bitwise; truncated or tampered files fail to load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"TRLMBIN1";

#[derive(Debug, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub sections: Vec<(String, Tensor)>,
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
}

struct HashingWriter<W: Write> {
    inner: W,
    fnv: Fnv,
}

impl<W: Write> HashingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.fnv.update(bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }
}

struct HashingReader<R: Read> {
    inner: R,
    fnv: Fnv,
}

impl<R: Read> HashingReader<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
        self.fnv.update(buf);
        Ok(())
    }

    fn take_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn take_u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, sections: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.sections.push((name.into(), t));
    }

    pub fn section(&self, name: &str) -> Result<&Tensor> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::CorruptFile(format!("missing section '{name}'")))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = HashingWriter { inner: BufWriter::new(file), fnv: Fnv::new() };
        w.put(MAGIC)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.put(&(meta.len() as u64).to_le_bytes())?;
        w.put(&meta)?;
        w.put(&(self.sections.len() as u64).to_le_bytes())?;
        for (name, t) in &self.sections {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::InvalidArgument("section name too long".into()));
            }
            w.put(&(nb.len() as u16).to_le_bytes())?;
            w.put(nb)?;
            w.put(&(t.rows() as u64).to_le_bytes())?;
            w.put(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.put(&v.to_le_bytes())?;
            }
        }
        let digest = w.fnv.0;
        w.inner.write_all(&digest.to_le_bytes())?;
        w.inner.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = HashingReader { inner: BufReader::new(file), fnv: Fnv::new() };
        let mut magic = [0u8; 8];
        r.take(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptFile("bad magic".into()));
        }
        let meta_len = r.take_u64()? as usize;
        if meta_len > 1 << 30 {
            return Err(Error::CorruptFile("implausible metadata length".into()));
        }
        let mut meta_bytes = vec![0u8; meta_len];
        r.take(&mut meta_bytes)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::CorruptFile(format!("metadata: {e}")))?;
        let n_sections = r.take_u64()? as usize;
        if n_sections > 1 << 20 {
            return Err(Error::CorruptFile("implausible section count".into()));
        }
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name_len = r.take_u16()? as usize;
            let mut name = vec![0u8; name_len];
            r.take(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::CorruptFile("section name not utf-8".into()))?;
            let rows = r.take_u64()? as usize;
            let cols = r.take_u64()? as usize;
            if rows.saturating_mul(cols) > 1 << 28 {
                return Err(Error::CorruptFile("implausible section size".into()));
            }
            let mut data = vec![0.0f64; rows * cols];
            let mut b = [0u8; 8];
            for v in data.iter_mut() {
                r.take(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            sections.push((name, Tensor::from_raw(rows, cols, data)));
        }
        let expected = r.fnv.0;
        let mut tail = [0u8; 8];
        r.inner
            .read_exact(&mut tail)
            .map_err(|_| Error::CorruptFile("missing checksum".into()))?;
        if u64::from_le_bytes(tail) != expected {
            return Err(Error::CorruptFile("checksum mismatch".into()));
        }
        let mut extra = [0u8; 1];
        if r.inner.read(&mut extra)? != 0 {
            return Err(Error::CorruptFile("trailing bytes after checksum".into()));
        }
        Ok(Self { meta, sections })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut c = Container::new(json!({"kind": "test", "step": 7}));
        c.push("a", Tensor::new(2, 3, vec![1.5, -2.25, 0.0, 1e-300, -0.0, 3.125]).unwrap());
        c.push("b", Tensor::new(1, 1, vec![42.0]).unwrap());
        c.write_to(&path).unwrap();
        let back = Container::read_from(&path).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.sections.len(), 2);
        assert!(back.section("a").unwrap().bit_eq(c.section("a").unwrap()));
        assert!(back.section("b").unwrap().bit_eq(c.section("b").unwrap()));
    }

    #[test]
    fn truncated_file_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut c = Container::new(json!({}));
        c.push("a", Tensor::new(10, 10, vec![1.0; 100]).unwrap());
        c.write_to(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Container::read_from(&path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut c = Container::new(json!({}));
        c.push("a", Tensor::new(4, 4, (0..16).map(|i| i as f64).collect()).unwrap());
        c.write_to(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Container::read_from(&path), Err(Error::CorruptFile(_))));
    }
}
