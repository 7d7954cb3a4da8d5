//! Named tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AMBA" | u32 version (1) | u32 entry count
//! per entry: u32 name length | UTF-8 name | u8 dtype | u8 rank | rank x u64 dims | payload
//! u64 CRC-64/XZ of every preceding byte
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8 (opaque bytes, e.g. a config echo).

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"AMBA";
pub const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::Bytes(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

impl Entry {
    pub fn tensor<T: Float>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let dims = t.shape().iter().map(|&d| d as u64).collect();
        let payload = match T::DTYPE {
            0 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self { name: name.into(), dims, payload }
    }

    pub fn bytes(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self { name: name.into(), dims: vec![bytes.len() as u64], payload: Payload::Bytes(bytes) }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    /// Float payload as a tensor of `T`, converting precision if needed.
    pub fn to_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| T::c(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::c(x)).collect(),
            Payload::Bytes(_) => return Err(Error::Format(format!("entry {:?} holds bytes, not floats", self.name))),
        };
        Tensor::new(&self.shape(), data)
    }
}

/// Ordered collection of uniquely named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::Format(format!("duplicate entry name {:?}", entry.name)));
        }
        let n: u64 = entry.dims.iter().product();
        if entry.dims.is_empty() || n as usize != entry.payload.len() {
            return Err(Error::Format(format!("entry {:?}: dims {:?} do not match payload", entry.name, entry.dims)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.code());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(v) => out.extend_from_slice(v),
            }
        }
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes; not an AMBA archive".into()));
        }
        if bytes.len() < 20 {
            return Err(Error::Format(format!("truncated archive ({} bytes)", bytes.len())));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let mut cur = Cursor { buf: body, pos: 4 };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}, expected {VERSION}")));
        }
        let count = cur.u32()? as usize;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format(format!("entry name at byte {} is not UTF-8", cur.pos - name_len)))?
                .to_string();
            let code = cur.take(1)?[0];
            let rank = cur.take(1)?[0] as usize;
            let dims: Vec<u64> = (0..rank).map(|_| cur.u64()).collect::<Result<_>>()?;
            let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("dims overflow".into()))?
                as usize;
            let payload = match code {
                0 => Payload::F32(cur.take(n.checked_mul(4).ok_or_else(truncated)?)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => Payload::F64(cur.take(n.checked_mul(8).ok_or_else(truncated)?)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => Payload::Bytes(cur.take(n)?.to_vec()),
                other => return Err(Error::Format(format!("entry {name:?}: unknown dtype code {other}"))),
            };
            archive.push(Entry { name, dims, payload })?;
        }
        if cur.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes before checksum", body.len() - cur.pos)));
        }
        let crc = CRC64.checksum(body);
        if crc != stored {
            return Err(Error::Format(format!("checksum mismatch: stored {stored:016x}, computed {crc:016x}")));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

fn truncated() -> Error {
    Error::Format("truncated payload".into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated payload at byte {}: need {n} more bytes", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.push(Entry::tensor("w", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 1.5))).unwrap();
        a.push(Entry::tensor("b", &Tensor::<f64>::from_fn(&[3], |i| i as f64 / 3.0))).unwrap();
        a.push(Entry::bytes("__config__", b"variant=nano\n".to_vec())).unwrap();
        a
    }

    #[test]
    fn exact_byte_layout() {
        let mut a = Archive::new();
        a.push(Entry::tensor("x", &Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap())).unwrap();
        let bytes = a.to_bytes();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"AMBA");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'x');
        expect.push(0);
        expect.push(1);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        let crc = CRC64.checksum(&expect);
        expect.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(Archive::from_bytes(&bad).is_err());
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 20]).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut a = sample();
        assert!(a.push(Entry::bytes("w", vec![1])).is_err());
    }
}
