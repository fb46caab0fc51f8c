//! The three parallel indices (path vectors, text vectors, BM25) over one
//! corpus, with incremental upserts, tag editing and persistence.

mod hnsw;
mod persist;
mod sparse;
mod vectors;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use persist::FORMAT_VERSION;
pub use sparse::{Bm25Params, SparseIndex, SparseStats};
pub use vectors::{AnnSettings, VectorStore};

use crate::corpus::Chunk;
use crate::embedding::{embed_path, EmbedError, Embedder, Metric, PathEmbedding, Vector};
use crate::tagging::{SemanticPath, Tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedChunk {
    pub chunk: Chunk,
    pub path: SemanticPath,
    pub v_text: Vector,
    pub v_path: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Tag,
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
    pub source: Source,
}

fn ranked(hits: Vec<(&str, f64)>, source: Source) -> Vec<RankedHit> {
    hits.into_iter()
        .enumerate()
        .map(|(i, (id, score))| RankedHit {
            chunk_id: id.to_string(),
            score,
            rank: i + 1,
            source,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSettings {
    pub dim: usize,
    pub tag_metric: Metric,
    pub dense_metric: Metric,
    pub path_embedding: PathEmbedding,
    pub bm25: Bm25Params,
    pub ann: AnnSettings,
}

impl IndexSettings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tag_metric: Metric::L2,
            dense_metric: Metric::Cosine,
            path_embedding: PathEmbedding::MeanTags,
            bm25: Bm25Params::default(),
            ann: AnnSettings::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector for `{chunk_id}` has dimension {actual}, index expects {expected}")]
    DimensionMismatch {
        chunk_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("unknown chunk `{0}`")]
    UnknownChunk(String),
    #[error("tag `{0}` normalizes to nothing")]
    EmptyTag(String),
    #[error("cannot remove the last master tag of `{0}`")]
    LastMasterTag(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("index format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("embedder fingerprint mismatch: index built with `{stored}`, current embedder is `{current}`")]
    FingerprintMismatch { stored: String, current: String },
    #[error("corrupt index file `{file}`: {reason}")]
    Corrupt { file: String, reason: String },
    #[error("index io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagScope {
    /// Master segment of every chunk of a document.
    Document,
    /// Paragraph segment of one chunk.
    Chunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAction {
    InjectTag,
    RemoveTag,
    Ingest,
    RemoveDocument,
}

/// Who made an edit and when (milliseconds since the Unix epoch).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditMeta {
    pub actor: String,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub seq: u64,
    pub actor: String,
    pub at_ms: u64,
    pub action: EditAction,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<TagScope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub affected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathChange {
    pub chunk_id: String,
    pub old_path: String,
    pub new_path: String,
    #[serde(skip)]
    pub old_v_path: Vector,
    #[serde(skip)]
    pub new_v_path: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub action: EditAction,
    pub target: String,
    pub scope: TagScope,
    pub tag: String,
    /// True when nothing changed (tag already present, or absent on removal).
    pub no_op: bool,
    pub changes: Vec<PathChange>,
}

impl EditReport {
    pub fn affected(&self) -> Vec<String> {
        self.changes.iter().map(|c| c.chunk_id.clone()).collect()
    }
}

#[derive(Debug, Default)]
pub struct UpsertReport {
    pub inserted: Vec<String>,
    pub replaced: Vec<String>,
    pub failed: Vec<(String, IndexError)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocEntry {
    pub title: String,
    pub metadata: BTreeMap<String, String>,
    pub chunk_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct Stored {
    chunk: Chunk,
    path: SemanticPath,
}

/// Tag index (path vectors), dense index (text vectors) and sparse index,
/// kept over the same chunk id set.
///
/// Mutations take `&mut self`; wrap the index in a lock for a single writer
/// with many readers.
#[derive(Debug, Clone)]
pub struct HybridIndex {
    settings: IndexSettings,
    fingerprint: String,
    tag: VectorStore,
    dense: VectorStore,
    sparse: SparseIndex,
    chunks: BTreeMap<String, Stored>,
    docs: BTreeMap<String, DocEntry>,
    editlog: Vec<EditRecord>,
}

impl HybridIndex {
    pub fn new(settings: IndexSettings, embedder_fingerprint: impl Into<String>) -> Self {
        let tag = VectorStore::new(settings.dim, settings.tag_metric, settings.ann);
        let dense = VectorStore::new(settings.dim, settings.dense_metric, settings.ann);
        let sparse = SparseIndex::new(settings.bm25);
        Self {
            settings,
            fingerprint: embedder_fingerprint.into(),
            tag,
            dense,
            sparse,
            chunks: BTreeMap::new(),
            docs: BTreeMap::new(),
            editlog: Vec::new(),
        }
    }

    pub fn for_embedder(settings: IndexSettings, embedder: &dyn Embedder) -> Self {
        let fingerprint = index_fingerprint(embedder, settings.path_embedding);
        Self::new(settings, fingerprint)
    }

    pub fn settings(&self) -> &IndexSettings {
        &self.settings
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn tag_store(&self) -> &VectorStore {
        &self.tag
    }

    pub fn dense_store(&self) -> &VectorStore {
        &self.dense
    }

    pub fn sparse(&self) -> &SparseIndex {
        &self.sparse
    }

    pub fn documents(&self) -> &BTreeMap<String, DocEntry> {
        &self.docs
    }

    pub fn document(&self, doc_id: &str) -> Option<&DocEntry> {
        self.docs.get(doc_id)
    }

    /// Chunk ids of a document, in ordinal order.
    pub fn doc_chunks(&self, doc_id: &str) -> Option<Vec<String>> {
        let entry = self.docs.get(doc_id)?;
        let mut ids: Vec<(&u32, &String)> = entry
            .chunk_ids
            .iter()
            .filter_map(|id| self.chunks.get(id).map(|s| (&s.chunk.ordinal, id)))
            .collect();
        ids.sort();
        Some(ids.into_iter().map(|(_, id)| id.clone()).collect())
    }

    pub fn chunk_ids(&self) -> impl Iterator<Item = &str> {
        self.chunks.keys().map(String::as_str)
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<(&Chunk, &SemanticPath)> {
        self.chunks.get(chunk_id).map(|s| (&s.chunk, &s.path))
    }

    pub fn get(&self, chunk_id: &str) -> Option<AugmentedChunk> {
        let s = self.chunks.get(chunk_id)?;
        Some(AugmentedChunk {
            chunk: s.chunk.clone(),
            path: s.path.clone(),
            v_text: self.dense.get(chunk_id)?.to_vec(),
            v_path: self.tag.get(chunk_id)?.to_vec(),
        })
    }

    pub fn editlog(&self) -> &[EditRecord] {
        &self.editlog
    }

    pub fn set_document_info(
        &mut self,
        doc_id: &str,
        title: &str,
        metadata: &BTreeMap<String, String>,
    ) {
        let entry = self.docs.entry(doc_id.to_string()).or_default();
        entry.title = title.to_string();
        entry.metadata = metadata.clone();
    }

    pub fn append_edit(
        &mut self,
        meta: &EditMeta,
        action: EditAction,
        target: &str,
        scope: Option<TagScope>,
        tag: Option<String>,
        affected: Vec<String>,
    ) -> &EditRecord {
        let seq = self.editlog.last().map_or(1, |r| r.seq + 1);
        self.editlog.push(EditRecord {
            seq,
            actor: meta.actor.clone(),
            at_ms: meta.at_ms,
            action,
            target: target.to_string(),
            scope,
            tag,
            affected,
        });
        self.editlog.last().unwrap()
    }

    fn check_dims(&self, item: &AugmentedChunk) -> Result<(), IndexError> {
        for v in [&item.v_text, &item.v_path] {
            if v.len() != self.settings.dim {
                return Err(IndexError::DimensionMismatch {
                    chunk_id: item.chunk.chunk_id.clone(),
                    expected: self.settings.dim,
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Inserts or replaces one chunk in all three indices. Validation runs
    /// before any mutation, so a failing item leaves the index untouched.
    pub fn upsert(&mut self, item: AugmentedChunk) -> Result<bool, IndexError> {
        self.check_dims(&item)?;
        let id = item.chunk.chunk_id.clone();
        let replaced = match self.chunks.get(&id) {
            Some(old) if old.chunk.doc_id != item.chunk.doc_id => {
                let old_doc = old.chunk.doc_id.clone();
                self.detach(&old_doc, &id);
                true
            }
            Some(_) => true,
            None => false,
        };
        self.tag.upsert(&id, &item.v_path);
        self.dense.upsert(&id, &item.v_text);
        self.sparse.upsert(&id, &item.chunk.text);
        self.docs
            .entry(item.chunk.doc_id.clone())
            .or_default()
            .chunk_ids
            .insert(id.clone());
        self.chunks.insert(
            id,
            Stored {
                chunk: item.chunk,
                path: item.path,
            },
        );
        Ok(replaced)
    }

    fn detach(&mut self, doc_id: &str, chunk_id: &str) {
        if let Some(d) = self.docs.get_mut(doc_id) {
            d.chunk_ids.remove(chunk_id);
            if d.chunk_ids.is_empty() {
                self.docs.remove(doc_id);
            }
        }
    }

    pub fn upsert_chunks(&mut self, items: Vec<AugmentedChunk>) -> UpsertReport {
        let mut report = UpsertReport::default();
        for item in items {
            let id = item.chunk.chunk_id.clone();
            match self.upsert(item) {
                Ok(true) => report.replaced.push(id),
                Ok(false) => report.inserted.push(id),
                Err(e) => report.failed.push((id, e)),
            }
        }
        report
    }

    /// Removes every chunk of `doc_id`; returns the removed chunk ids.
    pub fn remove_document(&mut self, doc_id: &str) -> Result<Vec<String>, IndexError> {
        let entry = self
            .docs
            .remove(doc_id)
            .ok_or_else(|| IndexError::UnknownDocument(doc_id.to_string()))?;
        let removed: Vec<String> = entry.chunk_ids.into_iter().collect();
        for id in &removed {
            self.tag.remove(id);
            self.dense.remove(id);
            self.sparse.remove(id);
            self.chunks.remove(id);
        }
        Ok(removed)
    }

    pub fn search_tag(&self, query: &[f32], n: usize) -> Vec<RankedHit> {
        ranked(self.tag.search(query, n), Source::Tag)
    }

    pub fn search_dense(&self, query: &[f32], n: usize) -> Vec<RankedHit> {
        ranked(self.dense.search(query, n), Source::Dense)
    }

    pub fn search_sparse(&self, query: &str, n: usize) -> Vec<RankedHit> {
        ranked(self.sparse.search(query, n), Source::Sparse)
    }

    /// Exhaustive rank and score of `chunk_id` in the tag index for `query`.
    pub fn tag_rank_of(&self, query: &[f32], chunk_id: &str) -> Option<(usize, f64)> {
        self.tag.rank_of(query, chunk_id)
    }

    fn edit_targets(&self, target: &str, scope: TagScope) -> Result<Vec<String>, IndexError> {
        match scope {
            TagScope::Document => self
                .doc_chunks(target)
                .ok_or_else(|| IndexError::UnknownDocument(target.to_string())),
            TagScope::Chunk => self
                .chunks
                .contains_key(target)
                .then(|| vec![target.to_string()])
                .ok_or_else(|| IndexError::UnknownChunk(target.to_string())),
        }
    }

    fn apply_path_edits(
        &mut self,
        embedder: &dyn Embedder,
        edits: Vec<(String, SemanticPath)>,
    ) -> Result<Vec<PathChange>, IndexError> {
        // embed everything first so a failure leaves the index untouched
        let mut staged = Vec::with_capacity(edits.len());
        for (id, path) in edits {
            let v = embed_path(&path, embedder, self.settings.path_embedding)?;
            if v.len() != self.settings.dim {
                return Err(IndexError::DimensionMismatch {
                    chunk_id: id,
                    expected: self.settings.dim,
                    actual: v.len(),
                });
            }
            staged.push((id, path, v));
        }
        let mut changes = Vec::with_capacity(staged.len());
        for (id, path, v) in staged {
            let stored = self.chunks.get_mut(&id).expect("edit target exists");
            let old_path = std::mem::replace(&mut stored.path, path);
            let old_v = self.tag.get(&id).map(<[f32]>::to_vec).unwrap_or_default();
            self.tag.upsert(&id, &v);
            changes.push(PathChange {
                chunk_id: id,
                old_path: old_path.display(),
                new_path: stored.path.display(),
                old_v_path: old_v,
                new_v_path: v,
            });
        }
        Ok(changes)
    }

    /// Appends `tag` to the master segment of every chunk of a document
    /// (document scope) or to one chunk's paragraph segment (chunk scope),
    /// then re-embeds the affected paths. Chunks already carrying the tag are
    /// left alone; when none change the edit is a no-op and nothing is logged.
    pub fn inject_tag(
        &mut self,
        embedder: &dyn Embedder,
        target: &str,
        raw_tag: &str,
        scope: TagScope,
        meta: &EditMeta,
    ) -> Result<EditReport, IndexError> {
        let tag = Tag::parse(raw_tag).ok_or_else(|| IndexError::EmptyTag(raw_tag.to_string()))?;
        let edits: Vec<(String, SemanticPath)> = self
            .edit_targets(target, scope)?
            .into_iter()
            .filter_map(|id| {
                let path = &self.chunks[&id].path;
                if path.contains(&tag) {
                    return None;
                }
                let mut path = path.clone();
                match scope {
                    TagScope::Document => path.master.push(tag.clone()),
                    TagScope::Chunk => path.paragraph.push(tag.clone()),
                }
                Some((id, path))
            })
            .collect();
        self.finish_edit(embedder, EditAction::InjectTag, target, tag, scope, edits, meta)
    }

    /// Inverse of [`inject_tag`](Self::inject_tag): drops `tag` from the
    /// targeted segment. Absent tags yield a no-op report.
    pub fn remove_tag(
        &mut self,
        embedder: &dyn Embedder,
        target: &str,
        raw_tag: &str,
        scope: TagScope,
        meta: &EditMeta,
    ) -> Result<EditReport, IndexError> {
        let tag = Tag::parse(raw_tag).ok_or_else(|| IndexError::EmptyTag(raw_tag.to_string()))?;
        let mut edits = Vec::new();
        for id in self.edit_targets(target, scope)? {
            let mut path = self.chunks[&id].path.clone();
            let segment = match scope {
                TagScope::Document => &mut path.master,
                TagScope::Chunk => &mut path.paragraph,
            };
            let before = segment.len();
            segment.retain(|t| !t.same_as(&tag));
            if segment.len() == before {
                continue;
            }
            if path.master.is_empty() {
                return Err(IndexError::LastMasterTag(target.to_string()));
            }
            edits.push((id, path));
        }
        self.finish_edit(embedder, EditAction::RemoveTag, target, tag, scope, edits, meta)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_edit(
        &mut self,
        embedder: &dyn Embedder,
        action: EditAction,
        target: &str,
        tag: Tag,
        scope: TagScope,
        edits: Vec<(String, SemanticPath)>,
        meta: &EditMeta,
    ) -> Result<EditReport, IndexError> {
        let no_op = edits.is_empty();
        let changes = self.apply_path_edits(embedder, edits)?;
        let report = EditReport {
            action,
            target: target.to_string(),
            scope,
            tag: tag.to_string(),
            no_op,
            changes,
        };
        if !no_op {
            self.append_edit(
                meta,
                action,
                target,
                Some(scope),
                Some(report.tag.clone()),
                report.affected(),
            );
        }
        Ok(report)
    }

    /// Checks that the three indices and the registry agree, and that the
    /// sparse statistics match their postings.
    pub fn check_consistency(&self) -> Result<(), String> {
        let base: BTreeSet<&str> = self.chunks.keys().map(String::as_str).collect();
        let tag: BTreeSet<&str> = self.tag.ids().collect();
        let dense: BTreeSet<&str> = self.dense.ids().collect();
        let sparse: BTreeSet<&str> = self.sparse.ids().collect();
        if tag != base || dense != base || sparse != base {
            return Err(format!(
                "chunk sets differ: chunks {} tag {} dense {} sparse {}",
                base.len(),
                tag.len(),
                dense.len(),
                sparse.len()
            ));
        }
        let mut registry = BTreeSet::new();
        for (doc_id, entry) in &self.docs {
            for id in &entry.chunk_ids {
                let owner = self.chunks.get(id).map(|s| s.chunk.doc_id.as_str());
                if owner != Some(doc_id.as_str()) || !registry.insert(id.as_str()) {
                    return Err(format!("registry entry `{id}` under `{doc_id}` is inconsistent"));
                }
            }
        }
        if registry != base {
            return Err("registry does not partition the chunk set".into());
        }
        self.sparse.check_consistency()
    }

    pub fn persist(&self, dir: &std::path::Path) -> Result<(), IndexError> {
        persist::write(self, dir)
    }

    /// Loads an index and refuses it unless it was built with
    /// `expected_fingerprint`.
    pub fn load(dir: &std::path::Path, expected_fingerprint: &str) -> Result<Self, IndexError> {
        persist::read(dir, Some(expected_fingerprint), None)
    }

    /// Loads with a caller-chosen ANN policy (ANN settings are not persisted).
    pub fn load_with(
        dir: &std::path::Path,
        expected_fingerprint: Option<&str>,
        ann: AnnSettings,
    ) -> Result<Self, IndexError> {
        persist::read(dir, expected_fingerprint, Some(ann))
    }
}

/// Embedder fingerprint plus the path embedding mode; two indices are
/// interchangeable only if these match.
pub fn index_fingerprint(embedder: &dyn Embedder, mode: PathEmbedding) -> String {
    let mode = match mode {
        PathEmbedding::MeanTags => "mean_tags",
        PathEmbedding::JoinedString => "joined_string",
    };
    format!("{}|path={mode}", embedder.fingerprint())
}
