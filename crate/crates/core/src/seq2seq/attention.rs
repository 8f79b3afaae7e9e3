use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const ATTN_MAGIC: &[u8; 4] = b"ATTN";
pub const ATTN_VERSION: u32 = 1;

/// Cross-attention weights, one row per target token over source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    weights: Vec<f32>,
    target_len: usize,
    source_len: usize,
}

impl AttentionMatrix {
    /// Builds a matrix from rows, checking the row-stochastic invariant
    /// (entries >= 0, sums within 1e-5 of 1).
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let target_len = rows.len();
        let source_len = rows.first().map_or(0, Vec::len);
        if target_len == 0 || source_len == 0 {
            return Err(Error::Contract("attention matrix must be non-empty".into()));
        }
        let mut weights = Vec::with_capacity(target_len * source_len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != source_len {
                return Err(Error::Contract(format!("row {} has {} entries, expected {source_len}", i + 1, row.len())));
            }
            weights.extend_from_slice(row);
        }
        let m = AttentionMatrix {
            weights,
            target_len,
            source_len,
        };
        m.check()?;
        Ok(m)
    }

    pub(crate) fn from_raw(target_len: usize, source_len: usize, weights: Vec<f32>) -> Self {
        debug_assert_eq!(weights.len(), target_len * source_len);
        AttentionMatrix {
            weights,
            target_len,
            source_len,
        }
    }

    pub fn check(&self) -> Result<()> {
        for i in 0..self.target_len {
            let row = self.row(i);
            if let Some(j) = row.iter().position(|&a| !(a >= 0.0)) {
                return Err(Error::Contract(format!(
                    "attention entry ({}, {}) = {} is negative or NaN",
                    i + 1,
                    j + 1,
                    row[j]
                )));
            }
            let sum: f32 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!("attention row {} sums to {sum}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Row `i`, 0-based.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.weights[i * self.source_len..(i + 1) * self.source_len]
    }

    /// Entry at 0-based `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.weights[i * self.source_len + j]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.weights
    }
}

/// Writes attention matrices: `"ATTN"`, u32 version, u32 count, then per
/// matrix u32 target_len, u32 source_len and row-major f32 LE.
pub fn write_attention_dump(path: &Path, matrices: &[AttentionMatrix]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ATTN_MAGIC);
    buf.extend_from_slice(&ATTN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for m in matrices {
        buf.extend_from_slice(&(m.target_len as u32).to_le_bytes());
        buf.extend_from_slice(&(m.source_len as u32).to_le_bytes());
        for x in &m.weights {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_attention_dump(path: &Path) -> Result<Vec<AttentionMatrix>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(path, &bytes, ATTN_MAGIC, ATTN_VERSION)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let t = r.u32()? as usize;
        let s = r.u32()? as usize;
        let raw = r.take(4 * t * s)?;
        let weights = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(AttentionMatrix::from_raw(t, s, weights));
    }
    r.finish()?;
    Ok(out)
}

/// Cursor over a little-endian dump with a 4-byte magic and u32 version.
pub(crate) struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::Magic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        let mut r = ByteReader { path, bytes, pos: 4 };
        let v = r.u32()?;
        if v != version {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported version {v}, expected {version}"),
            });
        }
        Ok(r)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("unexpected end of file at byte {}", self.bytes.len()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}
