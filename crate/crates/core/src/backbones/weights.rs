//! Portable weight file.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "PRCPTRA1"
//! version      u32
//! meta_count   u32
//!   key_len u32, key utf-8, value_len u32, value utf-8     (meta_count times)
//! entry_count  u32
//!   name_len u32, name utf-8, ndim u32, dims u32 x ndim,
//!   payload f32 x product(dims)                            (entry_count times)
//! ```
//!
//! Metadata is written in key order, so a file is a pure function of its
//! contents.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PRCPTRA1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WeightFileError {
    #[error("bad magic: not a weight file")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload while reading {0}")]
    Truncated(String),
    #[error("invalid utf-8 in {0}")]
    InvalidUtf8(String),
    #[error("duplicate entry name {0}")]
    DuplicateEntry(String),
    #[error("unknown entry name {0}")]
    UnknownEntry(String),
    #[error("missing entry {0}")]
    MissingEntry(String),
    #[error("entry {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("bad architecture metadata: {0}")]
    BadArchitecture(String),
    #[error("{0} unexpected bytes after the last entry")]
    TrailingBytes(usize),
}

impl WeightFileError {
    /// Stable numeric code, shared with the C interface.
    pub fn code(&self) -> i32 {
        match self {
            WeightFileError::BadMagic => 10,
            WeightFileError::UnsupportedVersion(_) => 11,
            WeightFileError::Truncated(_) => 12,
            WeightFileError::InvalidUtf8(_) => 13,
            WeightFileError::DuplicateEntry(_) => 14,
            WeightFileError::UnknownEntry(_) => 15,
            WeightFileError::MissingEntry(_) => 16,
            WeightFileError::ShapeMismatch { .. } => 17,
            WeightFileError::BadArchitecture(_) => 18,
            WeightFileError::TrailingBytes(_) => 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub version: u32,
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<WeightEntry>,
}

impl WeightFile {
    pub fn new(metadata: BTreeMap<String, String>, entries: Vec<WeightEntry>) -> Self {
        Self { version: VERSION, metadata, entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_u32(&mut out, self.metadata.len());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.entries.len());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            put_u32(&mut out, e.shape.len());
            for &d in &e.shape {
                put_u32(&mut out, d);
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightFileError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(WeightFileError::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(WeightFileError::UnsupportedVersion(version));
        }
        let meta_count = r.u32("metadata count")?;
        let mut metadata = BTreeMap::new();
        for _ in 0..meta_count {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.insert(k, v);
        }
        let entry_count = r.u32("entry count")?;
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(entry_count as usize);
        for _ in 0..entry_count {
            let name = r.string("entry name")?;
            if !seen.insert(name.clone()) {
                return Err(WeightFileError::DuplicateEntry(name));
            }
            let ndim = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32(&name)? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| WeightFileError::Truncated(name.clone()))?, &name)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(WeightEntry { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(WeightFileError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { version, metadata, entries })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(WeightFileError::Truncated(what.to_string()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightFileError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String, WeightFileError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| WeightFileError::InvalidUtf8(what.to_string()))
    }
}
