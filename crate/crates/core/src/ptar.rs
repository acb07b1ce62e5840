//! PTAR, the on-disk tensor archive format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "PTAR"
//! version u32      1
//! count   u32      number of tensors
//! then per tensor:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   dtype    u8       0 = 32-bit float
//!   ndim     u32
//!   dims     ndim × u64
//!   payload  product(dims) × 4 bytes, f32 little-endian, row-major
//! ```
//!
//! Entry order is preserved, names are unique, and
//! `read(write(archive)) == archive` bit-for-bit.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PTAR";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// An ordered, uniquely named collection of `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PtarArchive {
    entries: Vec<(String, Tensor<f32>)>,
}

impl PtarArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a tensor; names must be unique within the archive.
    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    /// Appends a tensor of any storage scalar, converting to `f32`.
    pub fn insert_cast<T: Scalar>(&mut self, name: &str, tensor: &Tensor<T>) -> Result<()> {
        self.insert(name, tensor.cast::<f32>())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`get`](Self::get) but failing with [`Error::MissingTensor`].
    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Serializes the archive to bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses an archive from bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::UnknownDtype(dtype));
            }
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > 4 {
                return Err(Error::Format(format!("rank {ndim} outside 1..=4")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.u64()?;
                if d == 0 {
                    return Err(Error::Format("zero extent".into()));
                }
                dims.push(d as usize);
            }
            let n: usize = dims.iter().product();
            let payload = r.take(n * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(&dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    /// Writes the archive to a file.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads an archive from a file.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}
