use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use signpost::engine::EngineError;
use signpost::generation::GenerationError;
use signpost::index::IndexError;
use signpost::llm::LlmError;
use signpost::retrieval::RetrievalError;
use signpost::tagging::TaggingError;
use thiserror::Error;

/// CLI failure, classified by exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Backend(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Backend(_) => 3,
        }
    }
}

impl From<EngineError> for AppError {
    fn from(e: EngineError) -> Self {
        if e.is_backend() {
            AppError::Backend(e.to_string())
        } else {
            AppError::Data(e.to_string())
        }
    }
}

/// Error body of every /v1 endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                detail: Value::Null,
            },
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.body.detail = detail;
        self
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use StatusCode as S;
        let message = e.to_string();
        let (status, code) = match &e {
            EngineError::Invalid(_) => (S::UNPROCESSABLE_ENTITY, "invalid_input"),
            EngineError::Tagging { source, .. } => match source {
                TaggingError::Backend { .. } => (S::SERVICE_UNAVAILABLE, "backend_unavailable"),
                _ => (S::UNPROCESSABLE_ENTITY, "untaggable"),
            },
            EngineError::Embedding { .. } => (S::SERVICE_UNAVAILABLE, "backend_unavailable"),
            EngineError::Index(ie) => match ie {
                IndexError::UnknownDocument(_) | IndexError::UnknownChunk(_) => (S::NOT_FOUND, "not_found"),
                IndexError::EmptyTag(_) => (S::BAD_REQUEST, "invalid_tag"),
                IndexError::LastMasterTag(_) => (S::CONFLICT, "last_master_tag"),
                IndexError::Embed(_) => (S::SERVICE_UNAVAILABLE, "backend_unavailable"),
                _ => (S::INTERNAL_SERVER_ERROR, "index_error"),
            },
            EngineError::Retrieval(re) => match re {
                RetrievalError::EmptyQuery => (S::BAD_REQUEST, "empty_query"),
                RetrievalError::EmptyIndex => (S::CONFLICT, "empty_index"),
                RetrievalError::Config(_) => (S::UNPROCESSABLE_ENTITY, "invalid_config"),
                RetrievalError::Embed(_) => (S::SERVICE_UNAVAILABLE, "backend_unavailable"),
            },
            EngineError::Generation(ge) => {
                let GenerationError::Backend { fingerprint, source } = ge;
                let (status, code) = if *source == LlmError::Unavailable {
                    (S::SERVICE_UNAVAILABLE, "generation_unavailable")
                } else {
                    (S::BAD_GATEWAY, "generation_failed")
                };
                return ApiError::new(status, code, message)
                    .with_detail(serde_json::json!({ "prompt_fingerprint": fingerprint }));
            }
        };
        ApiError::new(status, code, message)
    }
}
