//! Exact cosine index over entity-mention vectors with document-level results.
//!
//! File layout (little-endian):
//!
//! ```text
//! "NRIXv1" | u64 count | count x (u32 len, doc_id, u32 len, span_id, 500 x f32) | u32 crc32
//! ```
//!
//! The checksum covers every byte before it.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SpanRef;
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 6] = b"NRIXv1";
/// Width of vectors in the on-disk index.
pub const INDEX_DIM: usize = 500;

const SCAN_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_span_id: Option<String>,
}

impl RankedDoc {
    /// Descending score, then ascending doc id.
    pub fn ordering(a: &RankedDoc, b: &RankedDoc) -> Ordering {
        b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id))
    }
}

/// Documents in rank order, each at most once.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedResult(Vec<RankedDoc>);

impl RankedResult {
    pub fn new(docs: Vec<RankedDoc>) -> Self {
        RankedResult(docs)
    }

    pub fn docs(&self) -> &[RankedDoc] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RankedDoc> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|d| d.doc_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub doc_id: String,
    pub span_id: String,
    pub vector: Vec<f32>,
}

/// Returns `v / |v|` or `None` when the norm is zero or non-finite.
pub fn unit_vector(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    Some(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    slots: HashMap<SpanRef, usize>,
}

impl Default for VectorIndex {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
struct Best<'a> {
    score: f64,
    span_id: &'a str,
}

impl<'a> Best<'a> {
    fn better_than(&self, other: &Best<'a>) -> bool {
        self.score > other.score || (self.score == other.score && self.span_id < other.span_id)
    }
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::with_dim(INDEX_DIM)
    }

    /// An in-memory index of another width (e.g. raw, unprojected vectors).
    pub fn with_dim(dim: usize) -> Self {
        VectorIndex {
            dim,
            entries: Vec::new(),
            slots: HashMap::new(),
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

    pub fn num_docs(&self) -> usize {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.doc_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Normalizes and stores `vector`; an existing `(doc_id, span_id)` entry is replaced.
    pub fn add(&mut self, doc_id: &str, span_id: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        let vector = unit_vector(vector).ok_or(Error::NonFiniteVector)?;
        let key = SpanRef::new(doc_id, span_id);
        match self.slots.get(&key) {
            Some(&i) => self.entries[i].vector = vector,
            None => {
                self.slots.insert(key, self.entries.len());
                self.entries.push(IndexEntry {
                    doc_id: doc_id.to_string(),
                    span_id: span_id.to_string(),
                    vector,
                });
            }
        }
        Ok(())
    }

    fn scan_chunk<'a>(chunk: &'a [IndexEntry], q: &[f32]) -> HashMap<&'a str, Best<'a>> {
        let mut best: HashMap<&str, Best> = HashMap::new();
        for e in chunk {
            let score: f64 = e.vector.iter().zip(q).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            let cand = Best {
                score,
                span_id: &e.span_id,
            };
            best.entry(&e.doc_id)
                .and_modify(|b| {
                    if cand.better_than(b) {
                        *b = cand;
                    }
                })
                .or_insert(cand);
        }
        best
    }

    /// Top `k` documents by their best-scoring span. Documents below
    /// `min_score` (when given) are dropped before truncation.
    pub fn query_topk(&self, q: &[f32], k: usize, min_score: Option<f64>) -> Result<RankedResult> {
        if q.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        if k == 0 {
            return Ok(RankedResult::default());
        }
        let q = unit_vector(q).ok_or(Error::ZeroVector)?;
        let partials: Vec<HashMap<&str, Best>> = self
            .entries
            .par_chunks(SCAN_CHUNK)
            .map(|c| Self::scan_chunk(c, &q))
            .collect();
        let mut merged: HashMap<&str, Best> = HashMap::new();
        for part in partials {
            for (doc, cand) in part {
                merged
                    .entry(doc)
                    .and_modify(|b| {
                        if cand.better_than(b) {
                            *b = cand;
                        }
                    })
                    .or_insert(cand);
            }
        }
        let mut docs: Vec<RankedDoc> = merged
            .into_iter()
            .filter(|(_, b)| min_score.is_none_or(|m| b.score >= m))
            .map(|(doc, b)| RankedDoc {
                doc_id: doc.to_string(),
                score: b.score,
                best_span_id: Some(b.span_id.to_string()),
            })
            .collect();
        docs.sort_by(RankedDoc::ordering);
        docs.truncate(k);
        Ok(RankedResult::new(docs))
    }

    /// Byte size of one serialized entry.
    pub fn entry_bytes(doc_id: &str, span_id: &str) -> usize {
        4 + doc_id.len() + 4 + span_id.len() + INDEX_DIM * 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dim != INDEX_DIM {
            return Err(Error::UnsupportedIndexDim {
                expected: INDEX_DIM,
                actual: self.dim,
            });
        }
        let payload: usize = self
            .entries
            .iter()
            .map(|e| Self::entry_bytes(&e.doc_id, &e.span_id))
            .sum();
        let mut out = Vec::with_capacity(INDEX_MAGIC.len() + 8 + payload + 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            for s in [&e.doc_id, &e.span_id] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            for x in &e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptIndex(m.to_string());
        let min = INDEX_MAGIC.len() + 8 + 4;
        if bytes.len() < min {
            return Err(corrupt("file too short"));
        }
        if &bytes[..INDEX_MAGIC.len()] != INDEX_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut cur = Cursor {
            buf: body,
            pos: INDEX_MAGIC.len(),
        };
        let count = u64::from_le_bytes(
            cur.take(8)
                .ok_or_else(|| corrupt("truncated count"))?
                .try_into()
                .unwrap(),
        );
        let mut index = VectorIndex::new();
        for i in 0..count {
            let mut read_str = || -> Result<String> {
                let len = cur.take(4).ok_or_else(|| corrupt("truncated entry"))?;
                let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
                let raw = cur.take(len).ok_or_else(|| corrupt("truncated entry"))?;
                String::from_utf8(raw.to_vec()).map_err(|_| corrupt("identifier is not UTF-8"))
            };
            let doc_id = read_str()?;
            let span_id = read_str()?;
            let raw = cur
                .take(INDEX_DIM * 4)
                .ok_or_else(|| Error::CorruptIndex(format!("truncated vector in entry {i}")))?;
            let vector: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let key = SpanRef::new(&doc_id, &span_id);
            if index.slots.insert(key, index.entries.len()).is_some() {
                return Err(corrupt("duplicate entry"));
            }
            index.entries.push(IndexEntry {
                doc_id,
                span_id,
                vector,
            });
        }
        if cur.pos != body.len() {
            return Err(corrupt("trailing bytes after last entry"));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }
}
