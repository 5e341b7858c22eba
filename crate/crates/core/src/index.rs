//! Flat exact vector index over unit-norm embeddings.
//!
//! Every query is a linear scan with bounded top-k selection. Vectors are
//! normalized before insertion, so the dot product is the cosine similarity.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! "ARGX" | version u32 | dim u32 | count u64 | provider_id (u16 len + utf8)
//! per entry: chunk_id (u16 len + utf8) | dim x f32
//! ```

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INDEX_MAGIC: [u8; 4] = *b"ARGX";
pub const INDEX_VERSION: u32 = 1;

/// Norms below this are treated as degenerate embeddings.
pub const MIN_NORM: f64 = 1e-12;
/// Allowed deviation from unit norm for stored vectors.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("cannot normalize an empty vector")]
    EmptyVector,
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("duplicate chunk id {0}")]
    DuplicateId(String),
    #[error("vector for {chunk_id} is not unit norm ({norm})")]
    NotNormalized { chunk_id: String, norm: f64 },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corrupt index at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("{0} is too long to encode")]
    FieldTooLong(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IndexError>;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps values that are already unit norm, checking the tolerance.
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(IndexError::EmptyVector);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(IndexError::NotNormalized {
                chunk_id: String::new(),
                norm,
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f32 {
        dot(&self.0, &other.0)
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Dot product accumulated in f64 and rounded once to f32.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum::<f64>() as f32
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f32]) -> Result<EmbeddingVector> {
    if v.is_empty() {
        return Err(IndexError::EmptyVector);
    }
    let norm = l2_norm(v);
    if !norm.is_finite() || norm < MIN_NORM {
        return Err(IndexError::ZeroVector);
    }
    Ok(EmbeddingVector(
        v.iter().map(|&x| (f64::from(x) / norm) as f32).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
}

/// One scored result of [`VectorIndex::search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub chunk_id: String,
    pub score: f32,
}

/// Descending score, then ascending chunk id.
pub fn rank_order(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    provider_id: String,
    built_at: DateTime<Utc>,
}

impl VectorIndex {
    /// Builds an index from normalized entries. Entries are sorted by chunk
    /// id; duplicates and dimension mismatches are rejected.
    pub fn new(
        dim: usize,
        provider_id: impl Into<String>,
        mut entries: Vec<IndexEntry>,
        built_at: DateTime<Utc>,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        for e in &entries {
            if e.vector.dim() != dim {
                return Err(IndexError::Dimension {
                    expected: dim,
                    actual: e.vector.dim(),
                });
            }
            let norm = e.vector.norm();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(IndexError::NotNormalized {
                    chunk_id: e.chunk_id.clone(),
                    norm,
                });
            }
        }
        if let Some(w) = entries.windows(2).find(|w| w[0].chunk_id == w[1].chunk_id) {
            return Err(IndexError::DuplicateId(w[0].chunk_id.clone()));
        }
        Ok(Self {
            dim,
            entries,
            provider_id: provider_id.into(),
            built_at,
        })
    }

    pub fn empty(dim: usize, provider_id: impl Into<String>) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            provider_id: provider_id.into(),
            built_at: Utc::now(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn built_at(&self) -> DateTime<Utc> {
        self.built_at
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.entries
            .binary_search_by(|e| e.chunk_id.as_str().cmp(chunk_id))
            .is_ok()
    }

    /// Exact top-k by cosine similarity, keeping only scores `>= threshold`.
    pub fn search(&self, query: &EmbeddingVector, k: usize, threshold: f32) -> Result<Vec<SearchHit>> {
        if query.dim() != self.dim {
            return Err(IndexError::Dimension {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }

        // Max-heap on rank order: the top is the worst of the current k.
        struct Candidate<'a> {
            score: f32,
            id: &'a str,
        }
        impl PartialEq for Candidate<'_> {
            fn eq(&self, other: &Self) -> bool {
                self.cmp(other) == Ordering::Equal
            }
        }
        impl Eq for Candidate<'_> {}
        impl PartialOrd for Candidate<'_> {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Candidate<'_> {
            fn cmp(&self, other: &Self) -> Ordering {
                rank_order((self.score, self.id), (other.score, other.id))
            }
        }

        let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
        for entry in &self.entries {
            let score = query.dot(&entry.vector);
            if score < threshold {
                continue;
            }
            let cand = Candidate {
                score,
                id: &entry.chunk_id,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| SearchHit {
                chunk_id: c.id.to_owned(),
                score: c.score,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(32 + self.entries.len() * (16 + 4 * self.dim));
        out.extend_from_slice(&INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        let dim = u32::try_from(self.dim).map_err(|_| IndexError::FieldTooLong("dim".into()))?;
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        write_str16(&mut out, &self.provider_id)?;
        for e in &self.entries {
            write_str16(&mut out, &e.chunk_id)?;
            for &x in e.vector.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Decodes an index file. The format carries no timestamp, so
    /// `built_at` is supplied by the caller.
    pub fn from_bytes(bytes: &[u8], built_at: DateTime<Utc>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != INDEX_MAGIC {
            return Err(r.corrupt_at(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != INDEX_VERSION {
            return Err(r.corrupt_at(4, &format!("unsupported version {version}")));
        }
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(r.corrupt_at(8, "zero dimension"));
        }
        let count = r.u64("entry count")?;
        let provider_id = r.str16("provider id")?;
        // each entry needs at least its length prefix and vector
        let min_entry = 2 + 4 * dim as u64;
        if count.saturating_mul(min_entry) > r.remaining() as u64 {
            return Err(r.corrupt("truncated: entry count exceeds file size"));
        }
        let mut entries = Vec::with_capacity(count as usize);
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let entry_start = r.pos as u64;
            let chunk_id = r.str16("chunk id")?;
            let raw = r.take(4 * dim, "vector")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let norm = l2_norm(&values);
            if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(IndexError::Corrupt {
                    offset: entry_start,
                    reason: format!("vector for {chunk_id} has norm {norm}"),
                });
            }
            if let Some(p) = &prev {
                if *p >= chunk_id {
                    return Err(IndexError::Corrupt {
                        offset: entry_start,
                        reason: "entries not strictly sorted by chunk id".into(),
                    });
                }
            }
            prev = Some(chunk_id.clone());
            entries.push(IndexEntry {
                chunk_id,
                vector: EmbeddingVector(values),
            });
        }
        if r.remaining() != 0 {
            return Err(r.corrupt("trailing bytes after last entry"));
        }
        Ok(Self {
            dim,
            entries,
            provider_id,
            built_at,
        })
    }
}

fn write_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| IndexError::FieldTooLong(s.chars().take(32).collect()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn corrupt(&self, reason: &str) -> IndexError {
        self.corrupt_at(self.pos as u64, reason)
    }

    fn corrupt_at(&self, offset: u64, reason: &str) -> IndexError {
        IndexError::Corrupt {
            offset,
            reason: reason.to_owned(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.corrupt(&format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn str16(&mut self, what: &str) -> Result<String> {
        let start = self.pos as u64;
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| IndexError::Corrupt {
            offset: start,
            reason: format!("{what} is not valid UTF-8"),
        })
    }
}

/// Writes the index atomically: temp file in the same directory, then rename.
pub fn save_index(index: &VectorIndex, path: &Path) -> Result<()> {
    let bytes = index.to_bytes()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "index".into());
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads an index file; `built_at` comes from the file's modification time.
pub fn load_index(path: &Path) -> Result<VectorIndex> {
    let bytes = std::fs::read(path)?;
    let built_at = std::fs::metadata(path)
        .and_then(|m| m.modified())
        .map(DateTime::<Utc>::from)
        .unwrap_or_else(|_| Utc::now());
    VectorIndex::from_bytes(&bytes, built_at)
}
