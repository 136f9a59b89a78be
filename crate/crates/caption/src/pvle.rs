//! Binary embedding store: `PVLE`, version `u16`, count `u32`, dimension
//! `u32`, then `count` records of a 32-byte caption hash followed by
//! `dimension` little-endian `f32`s.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CaptionError, Result};

pub const MAGIC: &[u8; 4] = b"PVLE";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 4 + 4;

pub type CaptionHash = [u8; 32];

pub fn caption_hash(caption: &str) -> CaptionHash {
    Sha256::digest(caption.as_bytes()).into()
}

/// Records keep insertion order so a rewrite reproduces the input bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    records: Vec<(CaptionHash, Vec<f32>)>,
    index: HashMap<CaptionHash, usize>,
}

fn bad(msg: impl Into<String>) -> CaptionError {
    CaptionError::Format(msg.into())
}

impl EmbeddingStore {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 || u32::try_from(dimension).is_err() {
            return Err(bad(format!("dimension {dimension} out of range")));
        }
        Ok(Self {
            dimension,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Inserts or replaces the vector stored under `hash`.
    pub fn insert(&mut self, hash: CaptionHash, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(bad(format!("vector of length {} in a {}-d store", vector.len(), self.dimension)));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value in vector {}", hex::encode(hash))));
        }
        match self.index.get(&hash) {
            Some(&i) => self.records[i].1 = vector,
            None => {
                self.index.insert(hash, self.records.len());
                self.records.push((hash, vector));
            }
        }
        Ok(())
    }

    pub fn get(&self, hash: &CaptionHash) -> Option<&[f32]> {
        self.index.get(hash).map(|&i| self.records[i].1.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CaptionHash, &[f32])> {
        self.records.iter().map(|(h, v)| (h, v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.records.len() * (32 + 4 * self.dimension));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        for (h, v) in &self.records {
            out.extend_from_slice(h);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let (count, dimension) = (word(6), word(10));
        let mut store = Self::new(dimension)?;
        let record = 32 + 4 * dimension;
        let expected = count
            .checked_mul(record)
            .and_then(|n| n.checked_add(HEADER))
            .ok_or_else(|| bad("record table size overflows"))?;
        if bytes.len() != expected {
            return Err(bad(format!("{count} records of dimension {dimension} need {expected} bytes, got {}", bytes.len())));
        }
        for chunk in bytes[HEADER..].chunks_exact(record) {
            let hash: CaptionHash = chunk[..32].try_into().expect("32 bytes");
            if store.index.contains_key(&hash) {
                return Err(bad(format!("duplicate caption hash {}", hex::encode(hash))));
            }
            let v = chunk[32..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            store.insert(hash, v)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
            .map_err(|e| CaptionError::Format(format!("{}: {e}", path.display())))
    }
}
