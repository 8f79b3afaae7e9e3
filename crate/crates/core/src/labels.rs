//! Read/write pseudo-labels from attention matrices.
//!
//! For each target row `i` the cumulative attention `f_{i,j}` is compared
//! with the confidence threshold `gamma`; a write label additionally needs
//! the row's attention peak to have been read (`argmax_j' alpha_{i,j'} <= j`,
//! ties to the smallest index). A final pass keeps labels monotone across
//! rows: `l_{i,j} = 0` wherever `l_{i-1,j} = 0`. The last column is always
//! writable, and `gamma = 1` is the non-streaming case in which only the
//! last column is.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seq2seq::{AttentionMatrix, ByteReader};

pub const PLBL_MAGIC: &[u8; 4] = b"PLBL";
pub const PLBL_VERSION: u32 = 1;

/// Suggested threshold.
pub const DEFAULT_GAMMA: f32 = 0.5;

/// Binary `|y| x |x|` read/write label matrix (1 = may write).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLabelMatrix {
    labels: Vec<u8>,
    target_len: usize,
    source_len: usize,
    /// Threshold used; unknown for matrices read back from a dump.
    pub gamma: Option<f32>,
}

impl PolicyLabelMatrix {
    /// Builds a matrix from 0/1 rows and checks every invariant.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let target_len = rows.len();
        let source_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != source_len) || source_len == 0 {
            return Err(Error::Contract("label rows must be non-empty and equally long".into()));
        }
        let m = PolicyLabelMatrix {
            labels: rows.concat(),
            target_len,
            source_len,
            gamma: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Label at 0-based `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.source_len + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.labels[i * self.source_len..(i + 1) * self.source_len]
    }

    /// Checks binary entries, row monotonicity, a 1 in the last column and
    /// column monotonicity across rows.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.target_len {
            let row = self.row(i);
            if row.iter().any(|&l| l > 1) {
                return Err(Error::Contract(format!("row {} has a non-binary label", i + 1)));
            }
            if row.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Contract(format!("row {} is not non-decreasing", i + 1)));
            }
            if row[self.source_len - 1] != 1 {
                return Err(Error::Contract(format!("row {} never allows a write", i + 1)));
            }
            if i > 0 && (0..self.source_len).any(|j| row[j] == 1 && self.get(i - 1, j) == 0) {
                return Err(Error::Contract(format!("row {} writes earlier than row {i}", i + 1)));
            }
        }
        Ok(())
    }

    /// Fraction of cells labelled write.
    pub fn density(&self) -> f64 {
        self.labels.iter().map(|&l| l as usize).sum::<usize>() as f64 / self.labels.len().max(1) as f64
    }
}

/// `j_i = min{ j : l_{i,j} = 1 }`, 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadOffsets(pub Vec<usize>);

impl ReadOffsets {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

fn check_gamma(gamma: f32) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config("gamma", format!("{gamma} is outside (0, 1]")));
    }
    Ok(())
}

/// Row-wise running sum `f_{i,j} = sum_{k<=j} alpha_{i,k}`.
pub fn cumulative(a: &AttentionMatrix) -> Result<Vec<Vec<f32>>> {
    (0..a.target_len())
        .map(|i| {
            let mut acc = 0.0f32;
            a.row(i)
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    if !(x >= 0.0) {
                        return Err(Error::Contract(format!(
                            "attention entry ({}, {}) = {x} is negative",
                            i + 1,
                            j + 1
                        )));
                    }
                    acc += x;
                    Ok(acc)
                })
                .collect()
        })
        .collect()
}

fn first_argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

pub fn gen_policy_labels(a: &AttentionMatrix, gamma: f32) -> Result<PolicyLabelMatrix> {
    check_gamma(gamma)?;
    let f = cumulative(a)?;
    let n = a.source_len();
    let mut labels = vec![0u8; a.target_len() * n];
    for (i, frow) in f.iter().enumerate() {
        let peak = first_argmax(a.row(i));
        let row = &mut labels[i * n..(i + 1) * n];
        // the prefix predicate fires from the first qualifying column onward
        let start = if gamma < 1.0 {
            (peak..n).find(|&j| frow[j] >= gamma).unwrap_or(n - 1)
        } else {
            n - 1
        };
        row[start..].fill(1);
    }
    for i in 1..a.target_len() {
        for j in 0..n {
            if labels[(i - 1) * n + j] == 0 {
                labels[i * n + j] = 0;
            }
        }
    }
    Ok(PolicyLabelMatrix {
        labels,
        target_len: a.target_len(),
        source_len: n,
        gamma: Some(gamma),
    })
}

/// Naive re-implementation used as a test oracle: every cumulative sum is
/// re-added from scratch, the peak is found by exhaustive comparison, and
/// the cross-row pass is unrolled into "every earlier raw row agrees".
pub fn brute_force_labels(a: &AttentionMatrix, gamma: f32) -> Result<PolicyLabelMatrix> {
    check_gamma(gamma)?;
    let (m, n) = (a.target_len(), a.source_len());
    for i in 0..m {
        for j in 0..n {
            if !(a.get(i, j) >= 0.0) {
                return Err(Error::Contract(format!("negative attention at ({}, {})", i + 1, j + 1)));
            }
        }
    }
    let raw = |i: usize, j: usize| -> bool {
        if j == n - 1 {
            return true;
        }
        if gamma >= 1.0 {
            return false;
        }
        let mut f = 0.0f32;
        for k in 0..=j {
            f += a.get(i, k);
        }
        let mut peak = None;
        for cand in 0..n {
            let dominates = (0..n).all(|k| a.get(i, cand) >= a.get(i, k));
            if dominates {
                peak = Some(cand);
                break;
            }
        }
        let peak = peak.expect("finite row has a maximum");
        f >= gamma && peak <= j
    };
    let mut labels = vec![0u8; m * n];
    for i in 0..m {
        for j in 0..n {
            labels[i * n + j] = (0..=i).all(|k| raw(k, j)) as u8;
        }
    }
    Ok(PolicyLabelMatrix {
        labels,
        target_len: m,
        source_len: n,
        gamma: Some(gamma),
    })
}

pub fn read_offsets(l: &PolicyLabelMatrix) -> Result<ReadOffsets> {
    (0..l.target_len())
        .map(|i| {
            l.row(i)
                .iter()
                .position(|&x| x == 1)
                .map(|j| j + 1)
                .ok_or_else(|| Error::Contract(format!("label row {} has no write", i + 1)))
        })
        .collect::<Result<Vec<_>>>()
        .map(ReadOffsets)
}

/// Writes label matrices: `"PLBL"`, u32 version, u32 count, then per matrix
/// u32 target_len, u32 source_len and row-major bytes.
pub fn write_label_dump(path: &Path, labels: &[PolicyLabelMatrix]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PLBL_MAGIC);
    buf.extend_from_slice(&PLBL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in labels {
        buf.extend_from_slice(&(l.target_len as u32).to_le_bytes());
        buf.extend_from_slice(&(l.source_len as u32).to_le_bytes());
        buf.extend_from_slice(&l.labels);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_label_dump(path: &Path) -> Result<Vec<PolicyLabelMatrix>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(path, &bytes, PLBL_MAGIC, PLBL_VERSION)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for k in 0..count {
        let t = r.u32()? as usize;
        let s = r.u32()? as usize;
        let raw = r.take(t * s)?;
        let rows: Vec<Vec<u8>> = raw.chunks(s.max(1)).map(<[u8]>::to_vec).collect();
        let m = PolicyLabelMatrix::from_rows(&rows).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("matrix {}: {e}", k + 1),
        })?;
        out.push(m);
    }
    r.finish()?;
    Ok(out)
}

/// Summary numbers for choosing `gamma` by eye.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelStats {
    pub matrices: usize,
    /// Mean fraction of write cells.
    pub density: f64,
    /// Mean `j_i / |x|` over all target tokens.
    pub mean_offset_fraction: f64,
}

pub fn label_stats(labels: &[PolicyLabelMatrix]) -> Result<LabelStats> {
    let mut density = 0.0;
    let mut frac = 0.0;
    let mut tokens = 0usize;
    for l in labels {
        density += l.density();
        for &j in read_offsets(l)?.as_slice() {
            frac += j as f64 / l.source_len() as f64;
            tokens += 1;
        }
    }
    Ok(LabelStats {
        matrices: labels.len(),
        density: density / labels.len().max(1) as f64,
        mean_offset_fraction: frac / tokens.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn att(rows: &[&[f32]]) -> AttentionMatrix {
        AttentionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn rows(l: &PolicyLabelMatrix) -> Vec<Vec<u8>> {
        (0..l.target_len()).map(|i| l.row(i).to_vec()).collect()
    }

    #[test]
    fn cumulative_examples() {
        let f = cumulative(&att(&[&[0.2, 0.3, 0.5]])).unwrap();
        assert!((f[0][1] - 0.5).abs() < 1e-7 && (f[0][2] - 1.0).abs() < 1e-7);
        let f = cumulative(&att(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(f, vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn point_mass_rows() {
        let l = gen_policy_labels(&att(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]), 0.5).unwrap();
        assert_eq!(rows(&l), vec![vec![1, 1, 1], vec![0, 1, 1]]);
    }

    #[test]
    fn monotonic_pass_example() {
        let l = gen_policy_labels(&att(&[&[0.2, 0.8], &[0.9, 0.1]]), 0.5).unwrap();
        assert_eq!(rows(&l), vec![vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn peak_constraint_example() {
        let l = gen_policy_labels(&att(&[&[0.4, 0.1, 0.5]]), 0.4).unwrap();
        assert_eq!(rows(&l), vec![vec![0, 0, 1]]);
    }

    #[test]
    fn gamma_one_is_non_streaming() {
        let a = att(&[&[0.5, 0.5, 0.0], &[0.9, 0.1, 0.0]]);
        let l = gen_policy_labels(&a, 1.0).unwrap();
        assert_eq!(rows(&l), vec![vec![0, 0, 1], vec![0, 0, 1]]);
        assert_eq!(read_offsets(&l).unwrap().0, vec![3, 3]);
        assert_eq!(brute_force_labels(&a, 1.0).unwrap(), l);
    }

    #[test]
    fn oracle_agrees_on_hand_examples() {
        for (a, g) in [
            (att(&[&[0.2, 0.8], &[0.9, 0.1]]), 0.5),
            (att(&[&[0.4, 0.1, 0.5]]), 0.4),
            (att(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]), 0.5),
        ] {
            assert_eq!(gen_policy_labels(&a, g).unwrap(), brute_force_labels(&a, g).unwrap());
        }
    }

    #[test]
    fn gamma_range_is_checked() {
        let a = att(&[&[1.0]]);
        assert!(matches!(gen_policy_labels(&a, 0.0), Err(Error::Config { .. })));
        assert!(gen_policy_labels(&a, 1.01).is_err());
        assert!(brute_force_labels(&a, -1.0).is_err());
    }

    #[test]
    fn offsets_from_labels() {
        let l = PolicyLabelMatrix::from_rows(&[vec![1, 1], vec![0, 1]]).unwrap();
        assert_eq!(read_offsets(&l).unwrap().0, vec![1, 2]);
        assert!(PolicyLabelMatrix::from_rows(&[vec![0, 1], vec![1, 1]]).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.plbl");
        let l = gen_policy_labels(&att(&[&[0.2, 0.8], &[0.9, 0.1]]), 0.5).unwrap();
        write_label_dump(&path, &[l.clone(), l.clone()]).unwrap();
        let back = read_label_dump(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(rows(&back[1]), rows(&l));
        std::fs::write(&path, b"ATTN\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_label_dump(&path), Err(Error::Magic { .. })));
    }
}
