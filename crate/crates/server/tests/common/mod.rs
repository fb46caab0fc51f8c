#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use signpost::embedding::HashedEmbedder;
use signpost::index::AnnSettings;
use signpost::llm::{CompletionClient, NullClient, RetryPolicy, ScriptedClient};
use signpost::tagging::HeuristicTagger;
use signpost::{Agents, Engine, EngineConfig};
use signpost_server::AppState;
use tower::ServiceExt;

pub const DIM: usize = 64;

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy")
}

pub fn toy_client() -> Arc<ScriptedClient> {
    let raw = std::fs::read_to_string(toy_dir().join("llm.json")).unwrap();
    Arc::new(ScriptedClient::from_json(&raw).unwrap())
}

pub fn engine(client: Arc<dyn CompletionClient>) -> Engine {
    let mut agents = Agents::uniform(client);
    agents.retry = RetryPolicy {
        attempts: 2,
        base_delay_ms: 0,
    };
    let config = EngineConfig {
        ann: AnnSettings::exact(),
        ..EngineConfig::default()
    };
    Engine::new(config, Arc::new(HashedEmbedder::new(DIM)), Arc::new(HeuristicTagger::new()), agents).unwrap()
}

pub fn state_with(client: Arc<dyn CompletionClient>) -> AppState {
    AppState::new(Arc::new(engine(client)))
}

pub fn null_state() -> AppState {
    state_with(Arc::new(NullClient))
}

pub struct Reply {
    pub status: StatusCode,
    pub json: Value,
    pub raw: Vec<u8>,
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>, token: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let raw = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    let json = serde_json::from_slice(&raw).unwrap_or(Value::Null);
    Reply { status, json, raw }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, None, None).await
}

pub async fn post(app: &Router, uri: &str, body: &str) -> Reply {
    call(app, Method::POST, uri, Some(body), None).await
}

pub async fn delete(app: &Router, uri: &str, body: &str) -> Reply {
    call(app, Method::DELETE, uri, Some(body), None).await
}

/// Ingests the toy corpus through the API.
pub async fn ingest_toy(app: &Router) -> Reply {
    let body = serde_json::json!({ "corpus_path": toy_dir().join("docs") }).to_string();
    let r = post(app, "/v1/ingest", &body).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.json);
    r
}

pub async fn editlog_len(app: &Router) -> usize {
    get(app, "/v1/editlog").await.json.as_array().unwrap().len()
}
