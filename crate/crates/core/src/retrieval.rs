//! Online phase, run once per sub-query: rewrite, coarse retrieval from the
//! path and sparse indices, semantic re-ranking, weighted rank fusion, and
//! pruning.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, embed_text, EmbedError, Embedder, Vector};
use crate::index::HybridIndex;
use crate::llm::{
    parse_string_array, AgentRole, CompletionClient, CompletionRequest, LlmError, NullClient,
    RetryPolicy,
};
use crate::prompts::{render, PromptTemplates};
use crate::tagging::SemanticPath;

/// Longest sub-query kept from the rewriter, in words.
pub const MAX_SUBQUERY_WORDS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingRank {
    /// A source that did not rank the candidate contributes nothing.
    #[default]
    Zero,
    /// Treat an unranked candidate as placed just after the source's last
    /// ranked candidate.
    WorstPlusOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub tag: f64,
    pub sem: f64,
    pub sparse: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            tag: 0.25,
            sem: 0.25,
            sparse: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub tag_fanout_multiplier: usize,
    /// Sparse candidates per sub-query; `None` means `ceil(2k/5)`.
    pub sparse_fanout: Option<usize>,
    pub weights: FusionWeights,
    pub eta: f64,
    pub max_subqueries: usize,
    pub pruning_enabled: bool,
    pub expansion_enabled: bool,
    pub missing_rank: MissingRank,
    /// Sub-queries processed at once.
    pub concurrency: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            tag_fanout_multiplier: 3,
            sparse_fanout: None,
            weights: FusionWeights::default(),
            eta: 60.0,
            max_subqueries: 5,
            pruning_enabled: true,
            expansion_enabled: true,
            missing_rank: MissingRank::Zero,
            concurrency: 1,
        }
    }
}

impl RetrievalConfig {
    pub fn tag_fanout(&self) -> usize {
        self.tag_fanout_multiplier * self.k
    }

    pub fn sparse_fanout(&self) -> usize {
        self.sparse_fanout.unwrap_or((2 * self.k).div_ceil(5))
    }

    pub fn fusion(&self) -> FusionParams {
        FusionParams {
            weights: self.weights,
            eta: self.eta,
            missing: self.missing_rank,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let w = self.weights;
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if ![w.tag, w.sem, w.sparse].iter().all(|x| x.is_finite() && *x >= 0.0) {
            return Err("fusion weights must be finite and non-negative".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err("eta must be positive".into());
        }
        Ok(())
    }
}

/// Completion seats used at query time.
#[derive(Clone)]
pub struct Agents {
    pub rewriter: Arc<dyn CompletionClient>,
    pub pruner: Arc<dyn CompletionClient>,
    pub generator: Arc<dyn CompletionClient>,
    pub templates: PromptTemplates,
    pub retry: RetryPolicy,
    pub temperature: f32,
}

impl Agents {
    /// Every seat backed by `client`.
    pub fn uniform(client: Arc<dyn CompletionClient>) -> Self {
        Self {
            rewriter: client.clone(),
            pruner: client.clone(),
            generator: client,
            templates: PromptTemplates::default(),
            retry: RetryPolicy::default(),
            temperature: 0.0,
        }
    }

    pub fn null() -> Self {
        Self::uniform(Arc::new(NullClient))
    }
}

impl std::fmt::Debug for Agents {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agents")
            .field("retry", &self.retry)
            .field("temperature", &self.temperature)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn query_key(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalizes raw rewriter output into Q': `q` first, then at most
/// `max_subqueries` distinct sub-queries of at most twelve words each.
pub fn merge_subqueries(q: &str, raw: &[String], max_subqueries: usize) -> Vec<String> {
    let mut seen: HashSet<String> = HashSet::new();
    seen.insert(query_key(q));
    let mut out = vec![q.to_string()];
    for s in raw {
        if out.len() > max_subqueries {
            break;
        }
        let words: Vec<&str> = s.split_whitespace().take(MAX_SUBQUERY_WORDS).collect();
        if words.is_empty() {
            continue;
        }
        let sub = words.join(" ");
        if seen.insert(query_key(&sub)) {
            out.push(sub);
        }
    }
    out
}

/// Expands `q` into Q'. Any rewriter failure (after retries) or an
/// unparseable reply degrades to `[q]`.
pub fn rewrite_query(q: &str, config: &RetrievalConfig, agents: &Agents) -> Vec<String> {
    if !config.expansion_enabled || config.max_subqueries == 0 {
        return vec![q.to_string()];
    }
    let t = &agents.templates.rewrite;
    let max_n = config.max_subqueries.to_string();
    let request = CompletionRequest {
        role: AgentRole::Rewriter,
        system: t.system.clone(),
        user: render(&t.user, &[("q", q), ("hist", ""), ("max_n", &max_n)]),
        temperature: agents.temperature,
    };
    let reply = agents.retry.run(|_| {
        let out = agents.rewriter.complete(&request)?;
        match parse_string_array(&out) {
            Some(list) => Ok(list),
            None => Err(LlmError::Malformed(out)),
        }
    });
    match reply {
        Ok(raw) => merge_subqueries(q, &raw, config.max_subqueries),
        Err(e) => {
            let level = if e == LlmError::Unavailable { log::Level::Debug } else { log::Level::Warn };
            log::log!(level, "query rewriting failed, using the original query only: {e}");
            vec![q.to_string()]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceHit {
    pub rank: usize,
    /// L2 distance (tag), cosine (sem) or BM25 score (sparse).
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRanks {
    pub tag: Option<usize>,
    pub sem: Option<usize>,
    pub sparse: Option<usize>,
}

impl SourceRanks {
    pub fn count(&self) -> usize {
        [self.tag, self.sem, self.sparse].iter().flatten().count()
    }
}

/// A coarse-retrieval candidate with its path and per-source placements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub chunk_id: String,
    pub doc_id: String,
    pub path: SemanticPath,
    pub path_display: String,
    pub text: String,
    #[serde(skip)]
    pub v_text: Vector,
    pub tag: Option<SourceHit>,
    pub sem: Option<SourceHit>,
    pub sparse: Option<SourceHit>,
}

impl Candidate {
    pub fn ranks(&self) -> SourceRanks {
        SourceRanks {
            tag: self.tag.map(|h| h.rank),
            sem: self.sem.map(|h| h.rank),
            sparse: self.sparse.map(|h| h.rank),
        }
    }
}

/// Union of the top `3k` path-index hits and the top `ceil(2k/5)` sparse
/// hits, in first-seen order (tag hits, then sparse-only hits).
pub fn coarse_retrieve(
    sub_query: &str,
    query_vec: &[f32],
    index: &HybridIndex,
    config: &RetrievalConfig,
) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::new();
    let mut slot: BTreeMap<String, usize> = BTreeMap::new();
    let tag_hits = index.search_tag(query_vec, config.tag_fanout());
    let sparse_hits = if config.sparse_fanout() > 0 {
        index.search_sparse(sub_query, config.sparse_fanout())
    } else {
        Vec::new()
    };
    for (hit, is_tag) in tag_hits
        .iter()
        .map(|h| (h, true))
        .chain(sparse_hits.iter().map(|h| (h, false)))
    {
        let i = match slot.get(&hit.chunk_id) {
            Some(&i) => i,
            None => {
                let Some(item) = index.get(&hit.chunk_id) else {
                    continue;
                };
                slot.insert(hit.chunk_id.clone(), out.len());
                out.push(Candidate {
                    chunk_id: item.chunk.chunk_id,
                    doc_id: item.chunk.doc_id,
                    path_display: item.path.display(),
                    path: item.path,
                    text: item.chunk.text,
                    v_text: item.v_text,
                    tag: None,
                    sem: None,
                    sparse: None,
                });
                out.len() - 1
            }
        };
        let placed = Some(SourceHit {
            rank: hit.rank,
            score: hit.score,
        });
        if is_tag {
            out[i].tag = placed;
        } else {
            out[i].sparse = placed;
        }
    }
    out
}

/// Assigns R_sem: rank within the candidate set by descending cosine between
/// each candidate's text vector and the sub-query vector, ties by chunk id.
pub fn rank_semantic(candidates: &mut [Candidate], query_vec: &[f32]) {
    let mut order: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (i, cosine(query_vec, &c.v_text)))
        .collect();
    order.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| candidates[a.0].chunk_id.cmp(&candidates[b.0].chunk_id))
    });
    for (rank, (i, score)) in order.into_iter().enumerate() {
        candidates[i].sem = Some(SourceHit {
            rank: rank + 1,
            score,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub weights: FusionWeights,
    pub eta: f64,
    pub missing: MissingRank,
}

impl Default for FusionParams {
    fn default() -> Self {
        RetrievalConfig::default().fusion()
    }
}

/// Weighted reciprocal rank score, summed in tag, sem, sparse order.
/// `worst` holds each source's deepest rank among the candidates and is only
/// read under [`MissingRank::WorstPlusOne`].
pub fn rrf_score(ranks: &SourceRanks, params: &FusionParams, worst: &SourceRanks) -> f64 {
    let w = params.weights;
    let mut s = 0.0;
    for (rank, weight, deepest) in [
        (ranks.tag, w.tag, worst.tag),
        (ranks.sem, w.sem, worst.sem),
        (ranks.sparse, w.sparse, worst.sparse),
    ] {
        let r = match (rank, params.missing) {
            (Some(r), _) => r,
            (None, MissingRank::Zero) => continue,
            (None, MissingRank::WorstPlusOne) => deepest.unwrap_or(0) + 1,
        };
        s += weight / (params.eta + r as f64);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedHit {
    pub chunk_id: String,
    pub score: f64,
    pub ranks: SourceRanks,
}

/// Fuses rank assignments and returns the top `k` by score, breaking ties
/// by number of ranking sources (more first), then chunk id.
pub fn rrf_fuse(items: &[(String, SourceRanks)], k: usize, params: &FusionParams) -> Vec<FusedHit> {
    let worst = SourceRanks {
        tag: items.iter().filter_map(|(_, r)| r.tag).max(),
        sem: items.iter().filter_map(|(_, r)| r.sem).max(),
        sparse: items.iter().filter_map(|(_, r)| r.sparse).max(),
    };
    let mut fused: Vec<FusedHit> = items
        .iter()
        .filter(|(_, r)| r.count() > 0)
        .map(|(id, r)| FusedHit {
            chunk_id: id.clone(),
            score: rrf_score(r, params, &worst),
            ranks: *r,
        })
        .collect();
    fused.sort_by(fused_order);
    fused.truncate(k);
    fused
}

pub(crate) fn fused_order(a: &FusedHit, b: &FusedHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.ranks.count().cmp(&a.ranks.count()))
        .then_with(|| a.chunk_id.cmp(&b.chunk_id))
}

/// One item of C_k.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub chunk_id: String,
    pub doc_id: String,
    pub path: String,
    pub text: String,
    /// Whether `text` came back from the pruner (false on passthrough).
    pub pruned: bool,
}

/// Sends each fused chunk, anchored by its path, to the pruner. Empty
/// replies drop the chunk; failures keep it unpruned.
pub fn prune_contexts(
    fused: &[FusedHit],
    candidates: &[Candidate],
    sub_query: &str,
    original_query: &str,
    config: &RetrievalConfig,
    agents: &Agents,
) -> Vec<Evidence> {
    let by_id: BTreeMap<&str, &Candidate> =
        candidates.iter().map(|c| (c.chunk_id.as_str(), c)).collect();
    let t = &agents.templates.prune;
    let mut out = Vec::with_capacity(fused.len());
    for hit in fused {
        let Some(c) = by_id.get(hit.chunk_id.as_str()) else {
            continue;
        };
        let passthrough = Evidence {
            chunk_id: c.chunk_id.clone(),
            doc_id: c.doc_id.clone(),
            path: c.path_display.clone(),
            text: c.text.clone(),
            pruned: false,
        };
        if !config.pruning_enabled {
            out.push(passthrough);
            continue;
        }
        let request = CompletionRequest {
            role: AgentRole::Pruner,
            system: t.system.clone(),
            user: render(
                &t.user,
                &[
                    ("q", original_query),
                    ("sub_query", sub_query),
                    ("path", &c.path_display),
                    ("text", &c.text),
                ],
            ),
            temperature: agents.temperature,
        };
        match agents.retry.run(|_| agents.pruner.complete(&request)) {
            Ok(reply) => {
                let text = reply.trim();
                if !text.is_empty() {
                    out.push(Evidence {
                        text: text.to_string(),
                        pruned: true,
                        ..passthrough
                    });
                }
            }
            Err(e) => {
                let level = if e == LlmError::Unavailable { log::Level::Debug } else { log::Level::Warn };
                log::log!(level, "pruning `{}` failed, keeping it unpruned: {e}", c.chunk_id);
                out.push(passthrough);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQueryContext {
    pub sub_query: String,
    pub candidates: Vec<Candidate>,
    pub fused: Vec<FusedHit>,
    pub pruned: Vec<Evidence>,
}

/// Coarse retrieval, semantic ranking and fusion for one sub-query, without
/// pruning.
pub fn retrieve_fused(
    sub_query: &str,
    index: &HybridIndex,
    embedder: &dyn Embedder,
    config: &RetrievalConfig,
) -> Result<(Vec<Candidate>, Vec<FusedHit>), RetrievalError> {
    let v = embed_text(&[sub_query], embedder)?.remove(0);
    let mut candidates = coarse_retrieve(sub_query, &v, index, config);
    rank_semantic(&mut candidates, &v);
    let items: Vec<(String, SourceRanks)> = candidates
        .iter()
        .map(|c| (c.chunk_id.clone(), c.ranks()))
        .collect();
    let fused = rrf_fuse(&items, config.k, &config.fusion());
    Ok((candidates, fused))
}

/// Candidates and fused hits for one sub-query.
pub type FusedBlock = (Vec<Candidate>, Vec<FusedHit>);

/// Candidate and fused lists for every sub-query, in order.
pub fn fuse_all(
    queries: &[String],
    index: &HybridIndex,
    embedder: &dyn Embedder,
    config: &RetrievalConfig,
) -> Result<Vec<FusedBlock>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    crate::par::parallel_map(queries, config.concurrency, |sub| {
        retrieve_fused(sub, index, embedder, config)
    })
    .into_iter()
    .collect()
}

/// Prunes each sub-query's fused list and assembles the contexts.
pub fn prune_all(
    q: &str,
    queries: Vec<String>,
    fused: Vec<(Vec<Candidate>, Vec<FusedHit>)>,
    config: &RetrievalConfig,
    agents: &Agents,
) -> Vec<SubQueryContext> {
    let jobs: Vec<(String, Vec<Candidate>, Vec<FusedHit>)> = queries
        .into_iter()
        .zip(fused)
        .map(|(s, (c, f))| (s, c, f))
        .collect();
    crate::par::parallel_map(&jobs, config.concurrency, |(sub, candidates, fused)| {
        prune_contexts(fused, candidates, sub, q, config, agents)
    })
    .into_iter()
    .zip(jobs)
    .map(|(pruned, (sub_query, candidates, fused))| SubQueryContext {
        sub_query,
        candidates,
        fused,
        pruned,
    })
    .collect()
}

pub(crate) fn check_query(q: &str, config: &RetrievalConfig) -> Result<(), RetrievalError> {
    if q.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    config.validate().map_err(RetrievalError::Config)
}

/// Runs the full online pipeline; contexts come back in Q' order.
pub fn retrieve(
    q: &str,
    index: &HybridIndex,
    embedder: &dyn Embedder,
    agents: &Agents,
    config: &RetrievalConfig,
) -> Result<Vec<SubQueryContext>, RetrievalError> {
    check_query(q, config)?;
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let queries = rewrite_query(q, config, agents);
    let fused = fuse_all(&queries, index, embedder, config)?;
    Ok(prune_all(q, queries, fused, config, agents))
}

/// Deduplicated union of all fused lists in fused-score order; used when
/// scoring a multi-sub-query run against a single ranked list.
pub fn merged_ranking(contexts: &[SubQueryContext]) -> Vec<String> {
    let mut all: Vec<&FusedHit> = contexts.iter().flat_map(|c| &c.fused).collect();
    all.sort_by(|a, b| fused_order(a, b));
    let mut seen = HashSet::new();
    all.into_iter()
        .filter(|h| seen.insert(h.chunk_id.as_str()))
        .map(|h| h.chunk_id.clone())
        .collect()
}
