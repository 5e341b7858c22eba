use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ragline_core::feedback::StoreError;
use ragline_core::generation::GenerationError;
use serde_json::json;

/// Error response body: `{"error": {"code", "message"}}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// Maps a generation failure to a status with a message safe to show
    /// to end users; details go to the log.
    pub fn from_generation(err: &GenerationError) -> Self {
        tracing::warn!(error = %err, "generation failed");
        match err {
            GenerationError::Timeout { attempts } => Self::new(
                StatusCode::GATEWAY_TIMEOUT,
                "timeout",
                format!("the model did not respond in time ({attempts} attempts)"),
            ),
            GenerationError::Backend { status: Some(s), .. } => Self::new(
                StatusCode::BAD_GATEWAY,
                "backend",
                format!("the model backend returned status {s}"),
            ),
            GenerationError::Backend { status: None, .. } | GenerationError::Profile(_) => {
                Self::new(StatusCode::BAD_GATEWAY, "backend", "the model backend is unreachable")
            }
            GenerationError::StreamAborted { .. } => {
                Self::new(StatusCode::BAD_GATEWAY, "stream_aborted", "the model stream was interrupted")
            }
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(m) => Self::not_found(m),
            StoreError::Validation(m) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", m),
            other => {
                tracing::error!(error = %other, "store failure");
                Self::internal("storage failure")
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "bad_request", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(r.status(), "bad_request", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}
