//! Ingest and query orchestration around one shared index.
//!
//! Readers take the index read lock only while searching; tagging, embedding
//! and LLM calls happen outside it. Mutations are serialized by a writer
//! mutex and applied under the write lock.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{segment_document, Chunk, Document};
use crate::embedding::{embed_paths, embed_text, EmbedError, Embedder, Metric, PathEmbedding};
use crate::generation::{assemble_prompt, generate_answer, Answer, AssembledPrompt, GenerationError, DEFAULT_PROMPT_BUDGET};
use crate::index::{
    AnnSettings, AugmentedChunk, Bm25Params, EditAction, EditMeta, EditReport, HybridIndex,
    IndexError, IndexSettings, TagScope,
};
use crate::llm::LlmError;
use crate::retrieval::{
    check_query, fuse_all, merged_ranking, prune_all, rewrite_query, Agents, RetrievalConfig,
    RetrievalError, SubQueryContext,
};
use crate::tagging::{build_path, generate_paragraph_tags, MasterTagCache, SemanticPath, Tagger, TaggingError};
use crate::trace::QueryDebugTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub chunk_window: usize,
    pub chunk_overlap: usize,
    pub max_master_tags: usize,
    pub path_embedding: PathEmbedding,
    pub tag_metric: Metric,
    pub dense_metric: Metric,
    pub bm25: Bm25Params,
    pub ann: AnnSettings,
    pub retrieval: RetrievalConfig,
    pub prompt_budget: usize,
    /// Documents tagged and embedded at once during ingest.
    pub ingest_concurrency: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            chunk_window: 500,
            chunk_overlap: 0,
            max_master_tags: 5,
            path_embedding: PathEmbedding::MeanTags,
            tag_metric: Metric::L2,
            dense_metric: Metric::Cosine,
            bm25: Bm25Params::default(),
            ann: AnnSettings::default(),
            retrieval: RetrievalConfig::default(),
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            ingest_concurrency: 1,
        }
    }
}

impl EngineConfig {
    pub fn index_settings(&self, dim: usize) -> IndexSettings {
        IndexSettings {
            dim,
            tag_metric: self.tag_metric,
            dense_metric: self.dense_metric,
            path_embedding: self.path_embedding,
            bm25: self.bm25,
            ann: self.ann,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.chunk_window == 0 || self.chunk_overlap >= self.chunk_window {
            return Err("chunk window must be positive and larger than the overlap".into());
        }
        if self.max_master_tags == 0 {
            return Err("max_master_tags must be at least 1".into());
        }
        self.retrieval.validate()
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("document `{doc_id}`: {source}")]
    Tagging {
        doc_id: String,
        #[source]
        source: TaggingError,
    },
    #[error("document `{doc_id}`: embedding failed: {source}")]
    Embedding {
        doc_id: String,
        #[source]
        source: EmbedError,
    },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
}

impl EngineError {
    /// True for failures of an external backend (embedder or LLM).
    pub fn is_backend(&self) -> bool {
        match self {
            EngineError::Tagging { source, .. } => matches!(source, TaggingError::Backend { .. }),
            EngineError::Embedding { source, .. } | EngineError::Retrieval(RetrievalError::Embed(source)) => {
                !matches!(source, EmbedError::EmptyPath)
            }
            EngineError::Generation(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentIngest {
    pub doc_id: String,
    pub chunk_ids: Vec<String>,
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedChunk {
    pub chunk_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: Vec<DocumentIngest>,
    /// Chunks indexed with a master-only path after a tagger parse failure.
    pub retry_queue: Vec<QueuedChunk>,
    /// Chunks with nothing to tag, indexed with a master-only path.
    pub review_queue: Vec<QueuedChunk>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryOptions {
    pub k: Option<usize>,
    pub generate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub sub_queries: Vec<String>,
    pub contexts: Vec<SubQueryContext>,
    /// Deduplicated fused ranking across sub-queries.
    pub ranking: Vec<String>,
    pub prompt: Option<AssembledPrompt>,
    pub answer: Option<Answer>,
}

impl QueryOutcome {
    pub fn trace(&self, query: &str, config: &RetrievalConfig) -> QueryDebugTrace {
        QueryDebugTrace::new(query, config, self)
    }
}

struct Prepared {
    doc: Document,
    items: Vec<AugmentedChunk>,
    retry: Vec<QueuedChunk>,
    review: Vec<QueuedChunk>,
}

pub struct Engine {
    config: EngineConfig,
    embedder: Arc<dyn Embedder>,
    tagger: Arc<dyn Tagger>,
    agents: Agents,
    master_cache: MasterTagCache,
    index: RwLock<HybridIndex>,
    writer: Mutex<()>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("embedder", &self.embedder.fingerprint())
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        embedder: Arc<dyn Embedder>,
        tagger: Arc<dyn Tagger>,
        agents: Agents,
    ) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Invalid)?;
        let index = HybridIndex::for_embedder(config.index_settings(embedder.dim()), &*embedder);
        Ok(Self::assemble(config, embedder, tagger, agents, index))
    }

    /// Wraps a loaded index; its fingerprint must match `embedder`.
    pub fn with_index(
        config: EngineConfig,
        embedder: Arc<dyn Embedder>,
        tagger: Arc<dyn Tagger>,
        agents: Agents,
        index: HybridIndex,
    ) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Invalid)?;
        let expected = crate::index::index_fingerprint(&*embedder, index.settings().path_embedding);
        if index.fingerprint() != expected {
            return Err(IndexError::FingerprintMismatch {
                stored: index.fingerprint().to_string(),
                current: expected,
            }
            .into());
        }
        Ok(Self::assemble(config, embedder, tagger, agents, index))
    }

    fn assemble(
        config: EngineConfig,
        embedder: Arc<dyn Embedder>,
        tagger: Arc<dyn Tagger>,
        agents: Agents,
        index: HybridIndex,
    ) -> Self {
        Self {
            config,
            embedder,
            tagger,
            agents,
            master_cache: MasterTagCache::default(),
            index: RwLock::new(index),
            writer: Mutex::new(()),
        }
    }

    /// Loads a persisted index for `embedder`.
    pub fn open(
        dir: &Path,
        config: EngineConfig,
        embedder: Arc<dyn Embedder>,
        tagger: Arc<dyn Tagger>,
        agents: Agents,
    ) -> Result<Self, EngineError> {
        let fp = crate::index::index_fingerprint(&*embedder, config.path_embedding);
        let index = HybridIndex::load_with(dir, Some(&fp), config.ann)?;
        Self::with_index(config, embedder, tagger, agents, index)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn agents(&self) -> &Agents {
        &self.agents
    }

    pub fn embedder(&self) -> &dyn Embedder {
        &*self.embedder
    }

    pub fn read(&self) -> RwLockReadGuard<'_, HybridIndex> {
        self.index.read().unwrap()
    }

    pub fn persist(&self, dir: &Path) -> Result<(), EngineError> {
        let _w = self.writer.lock().unwrap();
        self.read().persist(dir)?;
        Ok(())
    }

    fn prepare(&self, doc: Document) -> Result<Prepared, EngineError> {
        let chunks = segment_document(&doc, self.config.chunk_window, self.config.chunk_overlap);
        let master = self
            .master_cache
            .get_or_generate(&doc, self.config.max_master_tags, &*self.tagger)
            .map_err(|source| EngineError::Tagging {
                doc_id: doc.doc_id.clone(),
                source,
            })?;
        let mut retry = Vec::new();
        let mut review = Vec::new();
        let mut paths: Vec<SemanticPath> = Vec::with_capacity(chunks.len());
        for chunk in &chunks {
            let paragraph = match generate_paragraph_tags(chunk, &*self.tagger) {
                Ok(tags) => tags,
                Err(e @ TaggingError::Parse { .. }) => {
                    retry.push(QueuedChunk {
                        chunk_id: chunk.chunk_id.clone(),
                        reason: e.to_string(),
                    });
                    Vec::new()
                }
                Err(e @ TaggingError::NoTaggableContent(_)) => {
                    review.push(QueuedChunk {
                        chunk_id: chunk.chunk_id.clone(),
                        reason: e.to_string(),
                    });
                    Vec::new()
                }
                Err(source) => {
                    return Err(EngineError::Tagging {
                        doc_id: doc.doc_id.clone(),
                        source,
                    })
                }
            };
            let path = build_path(master.clone(), paragraph).map_err(|source| EngineError::Tagging {
                doc_id: doc.doc_id.clone(),
                source,
            })?;
            paths.push(path);
        }
        let embed_err = |source| EngineError::Embedding {
            doc_id: doc.doc_id.clone(),
            source,
        };
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let v_text = embed_text(&texts, &*self.embedder).map_err(embed_err)?;
        let path_refs: Vec<&SemanticPath> = paths.iter().collect();
        let v_path = embed_paths(&path_refs, &*self.embedder, self.config.path_embedding).map_err(embed_err)?;
        let items = chunks
            .into_iter()
            .zip(paths)
            .zip(v_text.into_iter().zip(v_path))
            .map(|((chunk, path), (v_text, v_path)): ((Chunk, SemanticPath), _)| AugmentedChunk {
                chunk,
                path,
                v_text,
                v_path,
            })
            .collect();
        Ok(Prepared {
            doc,
            items,
            retry,
            review,
        })
    }

    /// Segments, tags, embeds and indexes `docs`. A document already in the
    /// index is replaced. Any failure aborts the batch before the index is
    /// touched. Appends one edit-log record.
    pub fn ingest(&self, docs: Vec<Document>, meta: &EditMeta) -> Result<IngestReport, EngineError> {
        let start = Instant::now();
        let mut ids = BTreeSet::new();
        for d in &docs {
            if d.text.is_empty() {
                return Err(EngineError::Invalid(format!("document `{}` has empty text", d.doc_id)));
            }
            if !ids.insert(d.doc_id.as_str()) {
                return Err(EngineError::Invalid(format!("duplicate doc_id `{}` in request", d.doc_id)));
            }
        }
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        self.tagger.observe(&texts);

        let prepared: Vec<Prepared> = crate::par::parallel_map(&docs, self.config.ingest_concurrency, |d| {
            self.prepare(d.clone())
        })
        .into_iter()
        .collect::<Result<_, _>>()?;

        let _w = self.writer.lock().unwrap();
        let mut index = self.index.write().unwrap();
        let mut report = IngestReport {
            documents: Vec::new(),
            retry_queue: Vec::new(),
            review_queue: Vec::new(),
            elapsed_ms: 0.0,
        };
        let mut affected = Vec::new();
        for p in prepared {
            let replaced = index.document(&p.doc.doc_id).is_some();
            if replaced {
                index.remove_document(&p.doc.doc_id)?;
            }
            let chunk_ids: Vec<String> = p.items.iter().map(|i| i.chunk.chunk_id.clone()).collect();
            let upsert = index.upsert_chunks(p.items);
            if let Some((id, e)) = upsert.failed.into_iter().next() {
                return Err(EngineError::Invalid(format!("chunk `{id}`: {e}")));
            }
            index.set_document_info(&p.doc.doc_id, &p.doc.title, &p.doc.metadata);
            affected.extend(chunk_ids.iter().cloned());
            report.documents.push(DocumentIngest {
                doc_id: p.doc.doc_id,
                chunk_ids,
                replaced,
            });
            report.retry_queue.extend(p.retry);
            report.review_queue.extend(p.review);
        }
        if !report.documents.is_empty() {
            let target = report
                .documents
                .iter()
                .map(|d| d.doc_id.as_str())
                .collect::<Vec<_>>()
                .join(",");
            index.append_edit(meta, EditAction::Ingest, &target, None, None, affected);
        }
        report.elapsed_ms = start.elapsed().as_secs_f64() * 1000.0;
        Ok(report)
    }

    pub fn remove_document(&self, doc_id: &str, meta: &EditMeta) -> Result<Vec<String>, EngineError> {
        let _w = self.writer.lock().unwrap();
        let mut index = self.index.write().unwrap();
        let removed = index.remove_document(doc_id)?;
        self.master_cache.invalidate(doc_id);
        index.append_edit(meta, EditAction::RemoveDocument, doc_id, None, None, removed.clone());
        Ok(removed)
    }

    /// Adds (`inject = true`) or removes a tag and re-embeds affected paths.
    pub fn edit_tag(
        &self,
        target: &str,
        tag: &str,
        scope: TagScope,
        inject: bool,
        meta: &EditMeta,
    ) -> Result<EditReport, EngineError> {
        let _w = self.writer.lock().unwrap();
        let mut index = self.index.write().unwrap();
        let report = if inject {
            index.inject_tag(&*self.embedder, target, tag, scope, meta)?
        } else {
            index.remove_tag(&*self.embedder, target, tag, scope, meta)?
        };
        Ok(report)
    }

    /// L2 distance and exhaustive rank of every chunk of `target` in the tag
    /// index for `query`.
    pub fn probe(&self, query: &str, target: &str, scope: TagScope) -> Result<Vec<ProbeResult>, EngineError> {
        let v = embed_text(&[query], &*self.embedder)
            .map_err(RetrievalError::from)?
            .remove(0);
        let index = self.read();
        let ids = match scope {
            TagScope::Document => index
                .doc_chunks(target)
                .ok_or_else(|| IndexError::UnknownDocument(target.to_string()))?,
            TagScope::Chunk => {
                index.chunk(target).ok_or_else(|| IndexError::UnknownChunk(target.to_string()))?;
                vec![target.to_string()]
            }
        };
        Ok(ids
            .into_iter()
            .filter_map(|id| {
                let (rank, distance) = index.tag_rank_of(&v, &id)?;
                Some(ProbeResult {
                    chunk_id: id,
                    distance,
                    rank,
                })
            })
            .collect())
    }

    pub fn query(&self, q: &str, options: QueryOptions) -> Result<QueryOutcome, EngineError> {
        let mut config = self.config.retrieval.clone();
        if let Some(k) = options.k {
            config.k = k;
        }
        check_query(q, &config)?;
        if self.read().is_empty() {
            return Err(RetrievalError::EmptyIndex.into());
        }
        let sub_queries = rewrite_query(q, &config, &self.agents);
        let fused = {
            let index = self.read();
            fuse_all(&sub_queries, &index, &*self.embedder, &config)?
        };
        let contexts = prune_all(q, sub_queries.clone(), fused, &config, &self.agents);
        let ranking = merged_ranking(&contexts);
        let (prompt, answer) = if options.generate {
            let prompt = assemble_prompt(q, &contexts, &self.agents.templates.answer, self.config.prompt_budget);
            let answer = generate_answer(
                &prompt,
                &*self.agents.generator,
                &self.agents.retry,
                self.agents.temperature,
            )?;
            (Some(prompt), Some(answer))
        } else {
            (None, None)
        };
        Ok(QueryOutcome {
            sub_queries,
            contexts,
            ranking,
            prompt,
            answer,
        })
    }

    /// Documents with title, metadata and chunk count.
    pub fn documents(&self) -> Vec<DocumentSummary> {
        let index = self.read();
        index
            .documents()
            .iter()
            .map(|(id, d)| DocumentSummary {
                doc_id: id.clone(),
                title: d.title.clone(),
                metadata: d.metadata.clone(),
                chunks: d.chunk_ids.len(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub chunk_id: String,
    pub distance: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSummary {
    pub doc_id: String,
    pub title: String,
    pub metadata: BTreeMap<String, String>,
    pub chunks: usize,
}

/// Whether an error came from an LLM seat that is simply not configured.
pub fn is_unavailable(e: &EngineError) -> bool {
    matches!(
        e,
        EngineError::Generation(GenerationError::Backend {
            source: LlmError::Unavailable,
            ..
        })
    )
}
