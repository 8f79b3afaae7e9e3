//! The `ABSM` tensor container shared by model and policy checkpoints.
//!
//! ```text
//! "ABSM"                4 bytes
//! version               u32 LE
//! header length         u64 LE
//! header                UTF-8 JSON: {"kind", "meta", "tensors": [{name, shape, offset}]}
//! tensor data           f32 LE, manifest order, offsets relative to data start
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn write(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in tensors {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Magic {
            path: path.to_path_buf(),
            expected: "ABSM".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < 16 {
        return Err(corrupt("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let data_start = 16u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| corrupt(format!("header length {header_len} runs past end of file")))? as usize;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let data = &bytes[data_start..];

    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != expected {
            return Err(corrupt(format!("tensor {} has offset {}, expected {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let end = expected + 4 * n as u64;
        if end > data.len() as u64 {
            return Err(corrupt(format!(
                "tensor {} needs bytes up to {end}, data section has {}",
                e.name,
                data.len()
            )));
        }
        let values = data[expected as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&e.shape, values).map_err(|err| corrupt(err.to_string()))?;
        tensors.push((e.name.clone(), t));
        expected = end;
    }
    if expected != data.len() as u64 {
        return Err(corrupt(format!(
            "{} trailing bytes after the last tensor",
            data.len() as u64 - expected
        )));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.absm");
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, f32::MIN_POSITIVE]).unwrap();
        let b = Tensor::from_vec(&[1], vec![-0.0]).unwrap();
        write(&path, "test", serde_json::json!({"x": 1}), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let c = read(&path).unwrap();
        assert_eq!(c.kind, "test");
        assert_eq!(c.tensors[0].1, a);
        assert_eq!(c.tensors[1].1.data()[0].to_bits(), (-0.0f32).to_bits());

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read(&path), Err(Error::Corrupt { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read(&path), Err(Error::Format { .. })));
    }
}
