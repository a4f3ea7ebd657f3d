//! Okapi BM25 over whole documents (sentence-level corpora index one sentence
//! per document). Used both as the lexical baseline and for hard-negative mining.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::index::{RankedDoc, RankedResult};

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
struct DocEntry {
    doc_id: String,
    len: u32,
    tf: HashMap<String, u32>,
}

#[derive(Debug, Clone, Default)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<DocEntry>,
    by_id: HashMap<String, usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    total_len: u64,
}

impl Bm25Index {
    pub fn new(params: Bm25Params) -> Self {
        Bm25Index {
            params,
            ..Default::default()
        }
    }

    pub fn from_docs<'a>(params: Bm25Params, docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut idx = Self::new(params);
        for (id, text) in docs {
            idx.add(id, text)?;
        }
        Ok(idx)
    }

    pub fn add(&mut self, doc_id: &str, text: &str) -> Result<()> {
        if self.by_id.contains_key(doc_id) {
            return Err(Error::DuplicateDocument(doc_id.to_string()));
        }
        let terms = tokenize(text);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in &terms {
            *tf.entry(t.clone()).or_default() += 1;
        }
        let slot = self.docs.len();
        for (t, &n) in &tf {
            self.postings.entry(t.clone()).or_default().push((slot, n));
        }
        self.total_len += terms.len() as u64;
        self.by_id.insert(doc_id.to_string(), slot);
        self.docs.push(DocEntry {
            doc_id: doc_id.to_string(),
            len: terms.len() as u32,
            tf,
        });
        Ok(())
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_len(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.docs.len() as f64
        }
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, idf: f64, tf: u32, len: u32, avg: f64) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let ratio = if avg > 0.0 { f64::from(len) / avg } else { 1.0 };
        idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * ratio))
    }

    /// Query terms are scored in sorted order so the sum does not depend on
    /// how the query was phrased.
    fn sorted(query_terms: &[String]) -> Vec<&str> {
        let mut q: Vec<&str> = query_terms.iter().map(String::as_str).collect();
        q.sort_unstable();
        q
    }

    pub fn score(&self, query_terms: &[String], doc_id: &str) -> Result<f64> {
        let &slot = self
            .by_id
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))?;
        let doc = &self.docs[slot];
        let avg = self.avg_len();
        Ok(Self::sorted(query_terms)
            .into_iter()
            .filter_map(|t| doc.tf.get(t).map(|&tf| self.term_score(self.idf(t), tf, doc.len, avg)))
            .sum())
    }

    /// Scores of every document with a positive score, unordered.
    pub fn score_all(&self, query_terms: &[String]) -> Vec<(usize, f64)> {
        let avg = self.avg_len();
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for t in Self::sorted(query_terms) {
            let Some(post) = self.postings.get(t) else { continue };
            let idf = self.idf(t);
            for &(slot, tf) in post {
                *acc.entry(slot).or_insert(0.0) += self.term_score(idf, tf, self.docs[slot].len, avg);
            }
        }
        acc.into_iter().filter(|&(_, s)| s > 0.0).collect()
    }

    pub fn doc_id(&self, slot: usize) -> &str {
        &self.docs[slot].doc_id
    }

    /// Top `k` documents for a free-text query; zero-score documents are dropped.
    pub fn topk(&self, query: &str, k: usize) -> RankedResult {
        let terms = tokenize(query);
        let mut hits: Vec<RankedDoc> = self
            .score_all(&terms)
            .into_iter()
            .map(|(slot, score)| RankedDoc {
                doc_id: self.docs[slot].doc_id.clone(),
                score,
                best_span_id: None,
            })
            .collect();
        hits.sort_by(RankedDoc::ordering);
        hits.truncate(k);
        RankedResult::new(hits)
    }
}
