//! Three engine operations for the browser, each taking and returning JSON:
//! document segmentation, weighted rank fusion, and a tag-injection probe
//! over a small in-memory index with hashed embeddings.

use serde::{Deserialize, Serialize};
use signpost::corpus::{chunk_id, segment_document, Chunk, Document};
use signpost::embedding::{embed_path, embed_text, HashedEmbedder};
use signpost::index::{EditMeta, HybridIndex, IndexSettings, TagScope};
use signpost::retrieval::{rrf_fuse, FusionParams, FusionWeights, MissingRank, SourceRanks};
use signpost::tagging::{build_path, normalize_tags};
use signpost::AugmentedChunk;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentInput {
    pub text: String,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub overlap: usize,
}

fn default_window() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub chunk_id: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

pub fn segment_text(input: &SegmentInput) -> Result<Vec<Segment>, String> {
    if input.window == 0 || input.overlap >= input.window {
        return Err("window must be positive and larger than the overlap".into());
    }
    let doc = Document::new("doc", input.text.clone());
    Ok(segment_document(&doc, input.window, input.overlap)
        .into_iter()
        .map(|c| Segment {
            chunk_id: c.chunk_id,
            start: c.char_span.0,
            end: c.char_span.1,
            text: c.text,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuseItem {
    pub chunk_id: String,
    #[serde(default)]
    pub tag: Option<usize>,
    #[serde(default)]
    pub sem: Option<usize>,
    #[serde(default)]
    pub sparse: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuseInput {
    pub items: Vec<FuseItem>,
    #[serde(default)]
    pub weights: FusionWeights,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub missing: MissingRank,
}

fn default_eta() -> f64 {
    60.0
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fused {
    pub chunk_id: String,
    pub score: f64,
    pub ranks: SourceRanks,
}

pub fn fuse(input: &FuseInput) -> Result<Vec<Fused>, String> {
    let w = input.weights;
    if ![w.tag, w.sem, w.sparse].iter().all(|x| x.is_finite() && *x >= 0.0) {
        return Err("weights must be finite and non-negative".into());
    }
    if !(input.eta.is_finite() && input.eta > 0.0) {
        return Err("eta must be positive".into());
    }
    if input.items.iter().any(|i| [i.tag, i.sem, i.sparse].contains(&Some(0))) {
        return Err("ranks start at 1".into());
    }
    let items: Vec<(String, SourceRanks)> = input
        .items
        .iter()
        .map(|i| {
            (
                i.chunk_id.clone(),
                SourceRanks {
                    tag: i.tag,
                    sem: i.sem,
                    sparse: i.sparse,
                },
            )
        })
        .collect();
    let params = FusionParams {
        weights: w,
        eta: input.eta,
        missing: input.missing,
    };
    Ok(rrf_fuse(&items, input.k, &params)
        .into_iter()
        .map(|h| Fused {
            chunk_id: h.chunk_id,
            score: h.score,
            ranks: h.ranks,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeChunk {
    pub doc_id: String,
    pub text: String,
    pub master: Vec<String>,
    #[serde(default)]
    pub paragraph: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeInput {
    pub chunks: Vec<ProbeChunk>,
    /// Document id (document scope) or chunk id (chunk scope).
    pub target: String,
    pub tag: String,
    #[serde(default = "default_scope")]
    pub scope: TagScope,
    pub query: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_scope() -> TagScope {
    TagScope::Document
}

fn default_dim() -> usize {
    256
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub distance: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub chunk_id: String,
    pub old_path: String,
    pub new_path: String,
    pub before: Point,
    pub after: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub no_op: bool,
    pub rows: Vec<ProbeRow>,
}

fn build_index(input: &ProbeInput, embedder: &HashedEmbedder) -> Result<HybridIndex, String> {
    let mut index = HybridIndex::for_embedder(IndexSettings::new(input.dim), embedder);
    let mut ordinals = std::collections::HashMap::<&str, u32>::new();
    for c in &input.chunks {
        let ord = ordinals.entry(c.doc_id.as_str()).or_default();
        let path = build_path(normalize_tags(&c.master), normalize_tags(&c.paragraph)).map_err(|e| e.to_string())?;
        let v_path = embed_path(&path, embedder, index.settings().path_embedding).map_err(|e| e.to_string())?;
        let v_text = embed_text(&[c.text.as_str()], embedder).map_err(|e| e.to_string())?.remove(0);
        let item = AugmentedChunk {
            chunk: Chunk {
                chunk_id: chunk_id(&c.doc_id, *ord),
                doc_id: c.doc_id.clone(),
                ordinal: *ord,
                text: c.text.clone(),
                char_span: (0, c.text.len()),
            },
            path,
            v_text,
            v_path,
        };
        *ord += 1;
        index.upsert(item).map_err(|e| e.to_string())?;
    }
    Ok(index)
}

/// Injects `tag` into the target and reports each affected chunk's tag-index
/// distance and rank for `query` before and after.
pub fn probe(input: &ProbeInput) -> Result<ProbeOutput, String> {
    if input.dim == 0 {
        return Err("dim must be positive".into());
    }
    let embedder = HashedEmbedder::new(input.dim);
    let mut index = build_index(input, &embedder)?;
    let q = embed_text(&[input.query.as_str()], &embedder).map_err(|e| e.to_string())?.remove(0);
    let targets: Vec<String> = match input.scope {
        TagScope::Document => index
            .doc_chunks(&input.target)
            .ok_or_else(|| format!("unknown document `{}`", input.target))?,
        TagScope::Chunk => vec![input.target.clone()],
    };
    let before: Vec<(String, Option<(usize, f64)>)> = targets
        .iter()
        .map(|id| (index.chunk(id).map(|(_, p)| p.display()).unwrap_or_default(), index.tag_rank_of(&q, id)))
        .collect();
    let meta = EditMeta {
        actor: "demo".into(),
        at_ms: 0,
    };
    let report = index
        .inject_tag(&embedder, &input.target, &input.tag, input.scope, &meta)
        .map_err(|e| e.to_string())?;
    let rows = targets
        .iter()
        .zip(before)
        .filter_map(|(id, (old_path, b))| {
            let (rank_b, dist_b) = b?;
            let (rank_a, dist_a) = index.tag_rank_of(&q, id)?;
            Some(ProbeRow {
                chunk_id: id.clone(),
                old_path,
                new_path: index.chunk(id)?.1.display(),
                before: Point {
                    distance: dist_b,
                    rank: rank_b,
                },
                after: Point {
                    distance: dist_a,
                    rank: rank_a,
                },
            })
        })
        .collect();
    Ok(ProbeOutput {
        no_op: report.no_op,
        rows,
    })
}

fn run<I: for<'de> Deserialize<'de>, O: Serialize>(json: &str, f: impl Fn(&I) -> Result<O, String>) -> Result<String, JsValue> {
    let input: I = serde_json::from_str(json).map_err(|e| JsValue::from_str(&format!("bad input: {e}")))?;
    let out = f(&input).map_err(|e| JsValue::from_str(&e))?;
    Ok(serde_json::to_string(&out).expect("output serializes"))
}

/// `{text, window?, overlap?}` → `[{chunk_id, start, end, text}]`
#[wasm_bindgen(js_name = segment)]
pub fn segment_js(input: &str) -> Result<String, JsValue> {
    run(input, segment_text)
}

/// `{items: [{chunk_id, tag?, sem?, sparse?}], weights?, eta?, k?, missing?}`
/// → `[{chunk_id, score, ranks}]`
#[wasm_bindgen(js_name = fuse)]
pub fn fuse_js(input: &str) -> Result<String, JsValue> {
    run(input, fuse)
}

/// `{chunks: [{doc_id, text, master, paragraph?}], target, tag, scope?, query, dim?}`
/// → `{no_op, rows: [{chunk_id, old_path, new_path, before, after}]}`
#[wasm_bindgen(js_name = probe)]
pub fn probe_js(input: &str) -> Result<String, JsValue> {
    run(input, probe)
}
