//! Text-to-vector backends, path embedding, and distance functions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::tagging::SemanticPath;
use crate::text::tokenize;

pub type Vector = Vec<f32>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EmbedError {
    #[error("embedding backend failed: {0}")]
    Backend(String),
    #[error("expected {expected}-dimensional vectors, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("backend returned {actual} vectors for {expected} inputs")]
    CountMismatch { expected: usize, actual: usize },
    #[error("cannot embed an empty path")]
    EmptyPath,
    #[error("non-finite value in embedding")]
    NonFinite,
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Backend(_))
    }
}

/// Maps a batch of strings to fixed-dimension vectors, preserving order.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the backend, model and settings; stored in index headers.
    fn fingerprint(&self) -> String;

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError>;
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError> {
        (**self).embed(texts)
    }
}

/// Embeds `texts` and checks count, dimension and finiteness of the result.
pub fn embed_text(texts: &[&str], embedder: &dyn Embedder) -> Result<Vec<Vector>, EmbedError> {
    let out = embedder.embed(texts)?;
    if out.len() != texts.len() {
        return Err(EmbedError::CountMismatch {
            expected: texts.len(),
            actual: out.len(),
        });
    }
    for v in &out {
        if v.len() != embedder.dim() {
            return Err(EmbedError::DimensionMismatch {
                expected: embedder.dim(),
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
    }
    Ok(out)
}

/// Feature-hashed bag of words with signed buckets, L2-normalized.
///
/// Tokens are hashed with XXH3-64 under a fixed seed; bit 63 picks the
/// sign, the remainder modulo `dim` picks the bucket. Text without tokens
/// maps to the zero vector.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    seed: u64,
}

pub const DEFAULT_HASH_SEED: u64 = 0x5157_4e50_4f53_5431;

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        Self::with_seed(dim, DEFAULT_HASH_SEED)
    }

    pub fn with_seed(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn embed_one(&self, text: &str) -> Vector {
        let mut v = vec![0f32; self.dim];
        for token in tokenize(text) {
            let h = xxh3_64_with_seed(token.as_bytes(), self.seed);
            let bucket = ((h & (u64::MAX >> 1)) % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        normalize(&mut v);
        v
    }
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hashed-xxh3:v1:dim={}:seed={:#x}", self.dim, self.seed)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Scales `v` to unit length in place; zero vectors are left untouched.
pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathEmbedding {
    /// Normalized mean of the per-tag embeddings.
    #[default]
    MeanTags,
    /// Embedding of the path's display string.
    JoinedString,
}

/// Unnormalized mean of per-tag embeddings, accumulated in f64.
pub fn path_mean(path: &SemanticPath, embedder: &dyn Embedder) -> Result<Vec<f64>, EmbedError> {
    if path.is_empty() {
        return Err(EmbedError::EmptyPath);
    }
    let tags: Vec<&str> = path.tags().map(|t| t.as_str()).collect();
    let vecs = embed_text(&tags, embedder)?;
    let mut mean = vec![0f64; embedder.dim()];
    for v in &vecs {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += f64::from(*x);
        }
    }
    let n = vecs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

pub fn embed_path(
    path: &SemanticPath,
    embedder: &dyn Embedder,
    mode: PathEmbedding,
) -> Result<Vector, EmbedError> {
    match mode {
        PathEmbedding::MeanTags => {
            let mean = path_mean(path, embedder)?;
            let mut v: Vector = mean.iter().map(|x| *x as f32).collect();
            normalize(&mut v);
            Ok(v)
        }
        PathEmbedding::JoinedString => {
            if path.is_empty() {
                return Err(EmbedError::EmptyPath);
            }
            let display = path.display();
            let mut v = embed_text(&[display.as_str()], embedder)?.remove(0);
            normalize(&mut v);
            Ok(v)
        }
    }
}

/// Embeds many paths with one backend call per distinct tag (or path string);
/// each result equals [`embed_path`] on the same path.
pub fn embed_paths(
    paths: &[&SemanticPath],
    embedder: &dyn Embedder,
    mode: PathEmbedding,
) -> Result<Vec<Vector>, EmbedError> {
    if paths.iter().any(|p| p.is_empty()) {
        return Err(EmbedError::EmptyPath);
    }
    let strings: Vec<Vec<String>> = paths
        .iter()
        .map(|p| match mode {
            PathEmbedding::MeanTags => p.tags().map(|t| t.as_str().to_string()).collect(),
            PathEmbedding::JoinedString => vec![p.display()],
        })
        .collect();
    let mut distinct: Vec<&str> = strings.iter().flatten().map(String::as_str).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = embed_text(&distinct, embedder)?;
    let lookup = |s: &str| &vectors[distinct.binary_search(&s).expect("embedded above")];
    Ok(strings
        .iter()
        .map(|parts| {
            let mut mean = vec![0f64; embedder.dim()];
            for part in parts {
                for (m, x) in mean.iter_mut().zip(lookup(part)) {
                    *m += f64::from(*x);
                }
            }
            let n = parts.len() as f64;
            let mut v: Vector = mean.iter().map(|m| (m / n) as f32).collect();
            normalize(&mut v);
            v
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Euclidean distance; smaller is closer.
    L2,
    /// Cosine similarity; larger is closer.
    Cosine,
}

impl Metric {
    pub fn higher_is_closer(self) -> bool {
        matches!(self, Metric::Cosine)
    }

    /// Scores `a` against `b` without a dimension check.
    pub fn score(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Metric::L2 => l2(a, b),
            Metric::Cosine => cosine(a, b),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Metric::L2),
            1 => Some(Metric::Cosine),
            _ => None,
        }
    }
}

pub fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

pub fn similarity(a: &[f32], b: &[f32], metric: Metric) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(metric.score(a, b))
}

#[cfg(feature = "remote")]
pub use remote::RemoteEmbedder;

#[cfg(feature = "remote")]
mod remote {
    use super::*;
    use crate::llm::InFlightLimit;
    use serde_json::json;
    use std::time::Duration;

    /// JSON/HTTP embeddings: `{model, input:[...]}` →
    /// `{data:[{embedding, index}]}` or `{embeddings:[[...]]}`.
    pub struct RemoteEmbedder {
        endpoint: String,
        model: String,
        api_key: Option<String>,
        dim: usize,
        batch_size: usize,
        agent: ureq::Agent,
        limit: Arc<InFlightLimit>,
    }

    impl RemoteEmbedder {
        pub fn new(
            endpoint: impl Into<String>,
            model: impl Into<String>,
            api_key: Option<String>,
            dim: usize,
            batch_size: usize,
            limit: Arc<InFlightLimit>,
        ) -> Self {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(60)))
                .http_status_as_error(false)
                .build()
                .into();
            Self {
                endpoint: endpoint.into(),
                model: model.into(),
                api_key,
                dim,
                batch_size: batch_size.max(1),
                agent,
                limit,
            }
        }

        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError> {
            let backend = |e: &dyn std::fmt::Display| EmbedError::Backend(e.to_string());
            let _permit = self.limit.acquire();
            let mut req = self.agent.post(&self.endpoint);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req
                .send_json(json!({"model": self.model, "input": texts}))
                .map_err(|e| backend(&e))?;
            let status = resp.status().as_u16();
            let body = resp.body_mut().read_to_string().map_err(|e| backend(&e))?;
            if status >= 400 {
                return Err(EmbedError::Backend(format!("status {status}: {body}")));
            }
            parse_embeddings(&body)
        }
    }

    pub(crate) fn parse_embeddings(body: &str) -> Result<Vec<Vector>, EmbedError> {
        #[derive(Deserialize)]
        struct Item {
            embedding: Vector,
            #[serde(default)]
            index: Option<usize>,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Response {
            Data { data: Vec<Item> },
            Plain { embeddings: Vec<Vector> },
        }
        let parsed: Response =
            serde_json::from_str(body).map_err(|e| EmbedError::Backend(e.to_string()))?;
        Ok(match parsed {
            Response::Plain { embeddings } => embeddings,
            Response::Data { mut data } => {
                if data.iter().all(|d| d.index.is_some()) {
                    data.sort_by_key(|d| d.index);
                }
                data.into_iter().map(|d| d.embedding).collect()
            }
        })
    }

    impl Embedder for RemoteEmbedder {
        fn dim(&self) -> usize {
            self.dim
        }

        fn fingerprint(&self) -> String {
            format!("remote:{}:dim={}", self.model, self.dim)
        }

        fn embed(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError> {
            let mut out = Vec::with_capacity(texts.len());
            for batch in texts.chunks(self.batch_size) {
                let mut attempt = 0;
                let vecs = loop {
                    match self.embed_batch(batch) {
                        Err(e) if e.is_retryable() && attempt < 2 => {
                            std::thread::sleep(Duration::from_millis(200 << attempt));
                            attempt += 1;
                        }
                        other => break other?,
                    }
                };
                if vecs.len() != batch.len() {
                    return Err(EmbedError::CountMismatch {
                        expected: batch.len(),
                        actual: vecs.len(),
                    });
                }
                out.extend(vecs);
            }
            Ok(out)
        }
    }

}
