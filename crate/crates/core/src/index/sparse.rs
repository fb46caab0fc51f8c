//! Okapi BM25 over an incrementally maintained inverted index.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SparseIndex {
    params: Bm25Params,
    /// term → chunk_id → term frequency
    postings: BTreeMap<String, BTreeMap<String, u32>>,
    doc_len: BTreeMap<String, u32>,
    /// chunk_id → distinct terms, so removal touches only its own lists
    chunk_terms: HashMap<String, Vec<String>>,
    total_len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseStats {
    pub chunks: usize,
    pub avgdl: f64,
    pub total_len: u64,
}

impl SparseIndex {
    pub fn new(params: Bm25Params) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.doc_len.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.doc_len.keys().map(String::as_str)
    }

    pub fn postings(&self) -> &BTreeMap<String, BTreeMap<String, u32>> {
        &self.postings
    }

    pub fn stats(&self) -> SparseStats {
        let chunks = self.doc_len.len();
        SparseStats {
            chunks,
            avgdl: if chunks == 0 {
                0.0
            } else {
                self.total_len as f64 / chunks as f64
            },
            total_len: self.total_len,
        }
    }

    /// Recomputes lengths from the postings and compares them with the
    /// maintained statistics.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut lens: HashMap<&str, u64> = HashMap::new();
        for list in self.postings.values() {
            if list.is_empty() {
                return Err("empty posting list retained".into());
            }
            for (id, tf) in list {
                if !self.doc_len.contains_key(id) {
                    return Err(format!("posting for unknown chunk `{id}`"));
                }
                *lens.entry(id).or_default() += u64::from(*tf);
            }
        }
        for (id, len) in &self.doc_len {
            let recomputed = lens.get(id.as_str()).copied().unwrap_or(0);
            if recomputed != u64::from(*len) {
                return Err(format!("length of `{id}`: stored {len}, postings {recomputed}"));
            }
        }
        let total: u64 = lens.values().sum();
        if total != self.total_len {
            return Err(format!("total length: stored {}, postings {total}", self.total_len));
        }
        Ok(())
    }

    pub fn upsert(&mut self, id: &str, text: &str) {
        self.remove(id);
        let tokens = tokenize(text);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokens.iter() {
            *tf.entry(t.clone()).or_default() += 1;
        }
        let terms: Vec<String> = tf.keys().cloned().collect();
        for (term, n) in tf {
            self.postings.entry(term).or_default().insert(id.to_string(), n);
        }
        self.chunk_terms.insert(id.to_string(), terms);
        self.doc_len.insert(id.to_string(), tokens.len() as u32);
        self.total_len += tokens.len() as u64;
    }

    /// Inserts a chunk from precomputed term frequencies (used on load).
    pub(crate) fn insert_counts(&mut self, id: &str, counts: &[(String, u32)]) {
        let mut len = 0u32;
        self.chunk_terms
            .insert(id.to_string(), counts.iter().map(|(t, _)| t.clone()).collect());
        for (term, n) in counts {
            self.postings
                .entry(term.clone())
                .or_default()
                .insert(id.to_string(), *n);
            len += n;
        }
        self.doc_len.insert(id.to_string(), len);
        self.total_len += u64::from(len);
    }

    pub fn remove(&mut self, id: &str) -> bool {
        let Some(len) = self.doc_len.remove(id) else {
            return false;
        };
        self.total_len -= u64::from(len);
        for term in self.chunk_terms.remove(id).unwrap_or_default() {
            if let Some(list) = self.postings.get_mut(&term) {
                list.remove(id);
                if list.is_empty() {
                    self.postings.remove(&term);
                }
            }
        }
        true
    }

    /// Robertson–Spärck Jones idf with the +1 floor, so every matching term
    /// contributes positively.
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_len.len() as f64;
        let df = df as f64;
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    /// Scores every chunk matching at least one query token. Repeated query
    /// tokens contribute once per occurrence. Sorted by score descending,
    /// ties by chunk id.
    pub fn search(&self, query: &str, n: usize) -> Vec<(&str, f64)> {
        if self.doc_len.is_empty() {
            return Vec::new();
        }
        let avgdl = self.stats().avgdl;
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<&str, f64> = HashMap::new();
        for token in tokenize(query) {
            let Some(list) = self.postings.get(&token) else {
                continue;
            };
            let idf = self.idf(list.len());
            for (id, tf) in list {
                let tf = f64::from(*tf);
                let dl = f64::from(self.doc_len[id]);
                let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
                let s = idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
                *scores.entry(id.as_str()).or_default() += s;
            }
        }
        let mut hits: Vec<(&str, f64)> = scores.into_iter().filter(|(_, s)| *s > 0.0).collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        hits.truncate(n);
        hits
    }
}
