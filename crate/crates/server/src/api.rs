//! The /v1 HTTP API.
//!
//! Engine calls are blocking, so each handler moves its work onto the
//! blocking pool; index mutation stays serialized inside the engine.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use signpost::corpus::{load_corpus, CorpusSchema, Document};
use signpost::engine::{DocumentSummary, IngestReport, ProbeResult};
use signpost::index::{EditMeta, EditRecord, EditReport, TagScope};
use signpost::tagging::SemanticPath;
use signpost::{Engine, QueryDebugTrace, QueryOptions};

use crate::error::ApiError;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub token: Option<String>,
    /// Index directory rewritten after each successful mutation.
    pub persist_dir: Option<PathBuf>,
    pub llm_configured: bool,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        Self {
            engine,
            token: None,
            persist_dir: None,
            llm_configured: false,
        }
    }
}

/// JSON body extractor whose rejections use the API error shape: syntax
/// errors are 400, well-formed bodies of the wrong shape 422.
pub struct Body<T>(pub T);

impl<S, T> FromRequest<S> for Body<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(JsonRejection::JsonDataError(e)) => Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "schema_violation",
                e.body_text(),
            )),
            Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.body_text())),
        }
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn edit_meta(actor: Option<String>) -> EditMeta {
    let at_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64);
    EditMeta {
        actor: actor.unwrap_or_else(|| "api".into()),
        at_ms,
    }
}

fn persist(state: &AppState) -> Result<(), ApiError> {
    if let Some(dir) = &state.persist_dir {
        state
            .engine
            .persist(dir)
            .map_err(|e| ApiError::internal(format!("edit applied but persisting failed: {e}")))?;
    }
    Ok(())
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Result<Response, ApiError> {
    if let Some(token) = &state.token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token"));
        }
    }
    Ok(next.run(req).await)
}

pub fn router(state: AppState) -> Router {
    let protected = Router::new()
        .route("/v1/ingest", post(ingest))
        .route("/v1/query", post(query))
        .route("/v1/docs", get(list_docs))
        .route("/v1/docs/{id}/chunks", get(doc_chunks))
        .route("/v1/docs/{id}/tags", post(inject_doc_tag).delete(remove_doc_tag))
        .route("/v1/chunks/{id}", get(get_chunk))
        .route("/v1/chunks/{id}/tags", post(inject_chunk_tag).delete(remove_chunk_tag))
        .route("/v1/editlog", get(editlog))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/v1/health", get(health))
        .merge(protected)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    #[serde(default)]
    pub documents: Vec<Document>,
    /// Corpus file or directory readable by the server.
    #[serde(default)]
    pub corpus_path: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<CorpusSchema>,
    #[serde(default)]
    pub actor: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestResponse {
    pub doc_ids: Vec<String>,
    pub chunk_count: usize,
    #[serde(flatten)]
    pub report: IngestReport,
}

/// Loads and ingests the requested documents, then persists.
pub fn run_ingest(state: &AppState, req: IngestRequest) -> Result<IngestResponse, ApiError> {
    let mut docs = req.documents;
    if let Some(path) = &req.corpus_path {
        let schema = req.schema.unwrap_or(CorpusSchema::Profiles);
        let loaded = load_corpus(path, schema)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "corpus_error", e.to_string()))?;
        docs.extend(loaded);
    }
    if docs.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_input",
            "request has neither documents nor a corpus_path",
        ));
    }
    let report = state.engine.ingest(docs, &edit_meta(req.actor))?;
    persist(state)?;
    Ok(IngestResponse {
        doc_ids: report.documents.iter().map(|d| d.doc_id.clone()).collect(),
        chunk_count: report.documents.iter().map(|d| d.chunk_ids.len()).sum(),
        report,
    })
}

async fn ingest(State(state): State<AppState>, Body(req): Body<IngestRequest>) -> Result<Json<IngestResponse>, ApiError> {
    blocking(move || run_ingest(&state, req).map(Json)).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub debug: bool,
    #[serde(default)]
    pub generate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResponse {
    /// Deduplicated fused ranking across sub-queries.
    pub ranking: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<signpost::generation::Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<QueryDebugTrace>,
}

pub fn run_query(engine: &Engine, req: &QueryRequest) -> Result<QueryResponse, ApiError> {
    let outcome = engine.query(
        &req.question,
        QueryOptions {
            k: req.k,
            generate: req.generate,
        },
    )?;
    let trace = req.debug.then(|| {
        let mut config = engine.config().retrieval.clone();
        if let Some(k) = req.k {
            config.k = k;
        }
        outcome.trace(&req.question, &config)
    });
    Ok(QueryResponse {
        ranking: outcome.ranking,
        answer: outcome.answer,
        trace,
    })
}

async fn query(State(state): State<AppState>, Body(req): Body<QueryRequest>) -> Result<Json<QueryResponse>, ApiError> {
    blocking(move || run_query(&state.engine, &req).map(Json)).await
}

async fn list_docs(State(state): State<AppState>) -> Result<Json<Vec<DocumentSummary>>, ApiError> {
    blocking(move || Ok(Json(state.engine.documents()))).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkView {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: u32,
    pub char_span: (usize, usize),
    pub text: String,
    pub path: SemanticPath,
    pub path_display: String,
}

fn chunk_view(engine: &Engine, id: &str) -> Option<ChunkView> {
    let index = engine.read();
    let (chunk, path) = index.chunk(id)?;
    Some(ChunkView {
        chunk_id: chunk.chunk_id.clone(),
        doc_id: chunk.doc_id.clone(),
        ordinal: chunk.ordinal,
        char_span: chunk.char_span,
        text: chunk.text.clone(),
        path: path.clone(),
        path_display: path.display(),
    })
}

async fn doc_chunks(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Vec<ChunkView>>, ApiError> {
    blocking(move || {
        let ids = state
            .engine
            .read()
            .doc_chunks(&id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown document `{id}`")))?;
        let mut views: Vec<ChunkView> = ids.iter().filter_map(|c| chunk_view(&state.engine, c)).collect();
        views.sort_by_key(|v| v.ordinal);
        Ok(Json(views))
    })
    .await
}

async fn get_chunk(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ChunkView>, ApiError> {
    blocking(move || {
        chunk_view(&state.engine, &id)
            .map(Json)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown chunk `{id}`")))
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagEditRequest {
    pub tag: String,
    /// When set, the target's tag-index distance and rank for this query
    /// are reported before and after the edit.
    #[serde(default)]
    pub probe_query: Option<String>,
    #[serde(default)]
    pub actor: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub distance: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDelta {
    pub chunk_id: String,
    pub before: ProbePoint,
    pub after: ProbePoint,
    /// `after - before`; negative means the chunk moved closer.
    pub distance_delta: f64,
    pub rank_delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagEditResponse {
    pub report: EditReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_query: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe: Vec<ProbeDelta>,
}

fn deltas(before: Vec<ProbeResult>, after: Vec<ProbeResult>) -> Vec<ProbeDelta> {
    before
        .into_iter()
        .filter_map(|b| {
            let a = after.iter().find(|a| a.chunk_id == b.chunk_id)?;
            Some(ProbeDelta {
                distance_delta: a.distance - b.distance,
                rank_delta: a.rank as i64 - b.rank as i64,
                before: ProbePoint {
                    distance: b.distance,
                    rank: b.rank,
                },
                after: ProbePoint {
                    distance: a.distance,
                    rank: a.rank,
                },
                chunk_id: b.chunk_id,
            })
        })
        .collect()
}

/// Applies one tag edit with optional before/after probing. Removing an
/// absent tag is reported as a 404 carrying the no-op report.
pub fn run_tag_edit(
    state: &AppState,
    target: &str,
    scope: TagScope,
    inject: bool,
    req: TagEditRequest,
) -> Result<TagEditResponse, ApiError> {
    let engine = &state.engine;
    let before = match &req.probe_query {
        Some(q) => engine.probe(q, target, scope)?,
        None => Vec::new(),
    };
    let report = engine.edit_tag(target, &req.tag, scope, inject, &edit_meta(req.actor))?;
    if !report.no_op {
        persist(state)?;
    }
    let probe = match &req.probe_query {
        Some(q) => deltas(before, engine.probe(q, target, scope)?),
        None => Vec::new(),
    };
    let response = TagEditResponse {
        report,
        probe_query: req.probe_query,
        probe,
    };
    if !inject && response.report.no_op {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "tag_not_present",
            format!("`{}` carries no tag `{}`; nothing removed", target, req.tag),
        )
        .with_detail(serde_json::to_value(&response).expect("report serializes")));
    }
    Ok(response)
}

async fn tag_route(state: AppState, target: String, scope: TagScope, inject: bool, req: TagEditRequest) -> Result<Json<TagEditResponse>, ApiError> {
    blocking(move || run_tag_edit(&state, &target, scope, inject, req).map(Json)).await
}

async fn inject_doc_tag(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<TagEditRequest>,
) -> Result<Json<TagEditResponse>, ApiError> {
    tag_route(state, id, TagScope::Document, true, req).await
}

async fn remove_doc_tag(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<TagEditRequest>,
) -> Result<Json<TagEditResponse>, ApiError> {
    tag_route(state, id, TagScope::Document, false, req).await
}

async fn inject_chunk_tag(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<TagEditRequest>,
) -> Result<Json<TagEditResponse>, ApiError> {
    tag_route(state, id, TagScope::Chunk, true, req).await
}

async fn remove_chunk_tag(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<TagEditRequest>,
) -> Result<Json<TagEditResponse>, ApiError> {
    tag_route(state, id, TagScope::Chunk, false, req).await
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct EditlogQuery {
    /// Only records with a larger sequence number.
    #[serde(default)]
    pub since: Option<u64>,
}

async fn editlog(State(state): State<AppState>, Query(q): Query<EditlogQuery>) -> Result<Json<Vec<EditRecord>>, ApiError> {
    blocking(move || {
        let index = state.engine.read();
        let since = q.since.unwrap_or(0);
        Ok(Json(index.editlog().iter().filter(|r| r.seq > since).cloned().collect()))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub documents: usize,
    pub chunks: usize,
    pub embedder: String,
    pub llm_configured: bool,
    pub version: String,
}

async fn health(State(state): State<AppState>) -> Result<Json<Health>, ApiError> {
    blocking(move || {
        let index = state.engine.read();
        Ok(Json(Health {
            status: "ok".into(),
            documents: index.documents().len(),
            chunks: index.len(),
            embedder: index.fingerprint().to_string(),
            llm_configured: state.llm_configured,
            version: env!("CARGO_PKG_VERSION").into(),
        }))
    })
    .await
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
