//! Append-only binary store of embedding rows with a per-row source index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"BROWFEAT";
pub const FEATURE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Where a row came from: slide, pyramid level and patch origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSource {
    pub source_id: String,
    pub level: u32,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    rows: Vec<f32>,
    index: Vec<RowSource>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            index: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn source(&self, i: usize) -> &RowSource {
        &self.index[i]
    }

    pub fn sources(&self) -> &[RowSource] {
        &self.index
    }

    pub fn append(&mut self, row: &[f32], source: RowSource) -> Result<usize> {
        if row.len() != self.dim {
            return Err(Error::shape(format!("row of length {} in a store of dimension {}", row.len(), self.dim)));
        }
        self.rows.extend_from_slice(row);
        self.index.push(source);
        Ok(self.index.len() - 1)
    }

    /// Writes row `i`; only the next unwritten position is accepted.
    pub fn write_row(&mut self, i: usize, row: &[f32], source: RowSource) -> Result<()> {
        if i < self.len() {
            return Err(Error::invalid(format!("row {i} already written; the store is append-only")));
        }
        if i > self.len() {
            return Err(Error::invalid(format!("row {i} skips past the end ({})", self.len())));
        }
        self.append(row, source).map(|_| ())
    }

    /// Concatenates shards in the given order.
    pub fn merge(shards: &[FeatureStore]) -> Result<Self> {
        let dim = shards.first().map_or(0, |s| s.dim);
        let mut out = FeatureStore::new(dim);
        for s in shards {
            if s.dim != dim {
                return Err(Error::shape("shards differ in dimension"));
            }
            out.rows.extend_from_slice(&s.rows);
            out.index.extend(s.index.iter().cloned());
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.rows.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.push(DTYPE_F32);
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.index {
            out.extend_from_slice(&(s.source_id.len() as u32).to_le_bytes());
            out.extend_from_slice(s.source_id.as_bytes());
            out.extend_from_slice(&s.level.to_le_bytes());
            out.extend_from_slice(&s.x.to_le_bytes());
            out.extend_from_slice(&s.y.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("feature store: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = b.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != FEATURE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if take(1)?[0] != DTYPE_F32 {
            return Err(bad("unsupported dtype"));
        }
        let rows = take(count * dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let source_id = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("source id is not UTF-8"))?;
            let level = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let x = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let y = u32::from_le_bytes(take(4)?.try_into().unwrap());
            index.push(RowSource { source_id, level, x, y });
        }
        if pos != b.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { dim, rows, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&b)
    }

    /// Rows as f64 vectors.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row(i).iter().map(|&v| v as f64).collect()).collect()
    }
}
