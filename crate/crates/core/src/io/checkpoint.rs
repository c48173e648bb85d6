//! `SNL1` tensor container.
//!
//! ```text
//! magic "SNL1" | version u32 | count u32 |
//!   per entry: name_len u16 | name | dtype u8 (0 = f64, 1 = f32) | rank u8 | dims u32 × rank | payload
//! ```
//! All integers and payloads are little-endian.

use std::path::Path;

use super::fsutil::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

pub const MAGIC: &[u8; 4] = b"SNL1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
        }
    }

    /// Bitwise comparison, so NaN payloads round-trip as equal.
    fn bits_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F64(a), TensorData::F64(b)) => a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())),
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl CheckpointEntry {
    pub fn to_array(&self) -> Result<DenseArray> {
        let data = match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        DenseArray::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("entry `{name}` exceeds format limits")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        self.entries.push(CheckpointEntry { name, shape, data });
        Ok(())
    }

    pub fn push_array(&mut self, name: impl Into<String>, a: &DenseArray) -> Result<()> {
        self.push(name, a.shape().to_vec(), TensorData::F64(a.data().to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn array(&self, name: &str) -> Result<DenseArray> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?
            .to_array()
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.bits_eq(&b.data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic (expected SNL1)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is too large")))?;
            let data = match dtype {
                0 => TensorData::F64(
                    r.take(n.checked_mul(8).unwrap_or(usize::MAX), "payload")?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F32(
                    r.take(n.checked_mul(4).unwrap_or(usize::MAX), "payload")?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Checkpoint(format!("unknown dtype code {other} for `{name}`"))),
            };
            ck.push(name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
