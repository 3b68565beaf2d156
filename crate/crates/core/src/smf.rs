//! The SMF chunk container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SMF1"                      magic, 4 bytes
//! u32                         chunk count
//! per chunk:
//!   u16                       name length in bytes
//!   [u8; len]                 UTF-8 name
//!   u8                        dtype (0 = f64, 1 = u32)
//!   u8                        ndim
//!   [u64; ndim]               dims
//!   payload                   row-major, product(dims) elements
//! ```

use std::collections::BTreeMap;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SMF1";

#[derive(Debug, Clone, PartialEq)]
pub enum ChunkData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ChunkData {
    fn dtype_code(&self) -> u8 {
        match self {
            ChunkData::F64(_) => 0,
            ChunkData::U32(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            ChunkData::F64(v) => v.len(),
            ChunkData::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: ChunkData,
}

impl Chunk {
    pub fn f64(name: &str, dims: &[usize], data: Vec<f64>) -> Self {
        Self::new(name, dims, ChunkData::F64(data))
    }

    pub fn u32(name: &str, dims: &[usize], data: Vec<u32>) -> Self {
        Self::new(name, dims, ChunkData::U32(data))
    }

    fn new(name: &str, dims: &[usize], data: ChunkData) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Chunk {
            name: name.to_owned(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SmfError {
    #[error("bad magic bytes: expected \"SMF1\"")]
    BadMagic,
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("chunk name is not valid UTF-8")]
    BadName,
    #[error("chunk `{chunk}` has unknown dtype code {code}")]
    BadDtype { chunk: String, code: u8 },
    #[error("chunk `{0}` appears more than once")]
    Duplicate(String),
    #[error("chunk `{0}` is too large")]
    Oversized(String),
    #[error("{0} trailing bytes after last chunk")]
    TrailingBytes(usize),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SmfError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| SmfError::Truncated(what.to_owned()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, SmfError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, SmfError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, SmfError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SmfError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse every chunk of an SMF container, keyed by name.
pub fn read_container(bytes: &[u8]) -> Result<BTreeMap<String, Chunk>, SmfError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(SmfError::BadMagic);
    }
    let mut cur = Cursor { buf: bytes, pos: 4 };
    let count = cur.u32("chunk count")?;
    let mut chunks = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u16("chunk name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "chunk name")?)
            .map_err(|_| SmfError::BadName)?
            .to_owned();
        let code = cur.u8(&name)?;
        let ndim = cur.u8(&name)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64(&name)?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
            .ok_or_else(|| SmfError::Oversized(name.clone()))?;
        let data = match code {
            0 => {
                let raw = cur.take(count.checked_mul(8).ok_or_else(|| SmfError::Oversized(name.clone()))?, &name)?;
                ChunkData::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let raw = cur.take(count.checked_mul(4).ok_or_else(|| SmfError::Oversized(name.clone()))?, &name)?;
                ChunkData::U32(
                    raw.chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            code => return Err(SmfError::BadDtype { chunk: name, code }),
        };
        if chunks.contains_key(&name) {
            return Err(SmfError::Duplicate(name));
        }
        chunks.insert(name.clone(), Chunk { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(SmfError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(chunks)
}

/// Serialize chunks in the given order.
pub fn write_container(chunks: &[Chunk]) -> Vec<u8> {
    let payload: usize = chunks.iter().map(|c| c.data.len() * 8 + 64).sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(chunks.len() as u32).to_le_bytes());
    for c in chunks {
        out.extend_from_slice(&(c.name.len() as u16).to_le_bytes());
        out.extend_from_slice(c.name.as_bytes());
        out.push(c.data.dtype_code());
        out.push(c.dims.len() as u8);
        for d in &c.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &c.data {
            ChunkData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ChunkData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}
