use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

use rcg_core::pipeline::EngineError;

/// JSON error body: `{"error": {"code", "message"}}`.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn read_only() -> Self {
        ApiError::new(
            StatusCode::FORBIDDEN,
            "read_only",
            "server is running in read-only mode; updates are disabled",
        )
    }

    pub fn queue_full() -> Self {
        ApiError::new(StatusCode::TOO_MANY_REQUESTS, "queue_full", "generation queue is full, retry later")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn body(&self) -> serde_json::Value {
        serde_json::json!({ "code": self.code, "message": self.message })
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match &e {
            EngineError::BadRequest(m) => ApiError::bad_request(m.clone()),
            EngineError::Budget(inner) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, inner.code(), e.to_string()),
            EngineError::Upstream { code, message } => ApiError::new(StatusCode::BAD_GATEWAY, code, message.clone()),
            EngineError::Config(m) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "config", m.clone()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.body() });
        (self.status, Json(body)).into_response()
    }
}
