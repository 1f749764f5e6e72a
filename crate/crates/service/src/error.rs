use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use cdemap_core::decomposer::DictionaryError;
use cdemap_core::reservoir::ReservoirError;
use serde_json::{json, Value};

/// JSON error body: `{"error": {"code", "message", "details"?}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), details: None }
    }

    pub fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({ "code": self.code, "message": self.message });
        if let Some(details) = self.details {
            error["details"] = details;
        }
        (self.status, Json(json!({ "error": error }))).into_response()
    }
}

impl From<DictionaryError> for ApiError {
    fn from(e: DictionaryError) -> Self {
        let details = match &e {
            DictionaryError::Rows(rows) => json!({ "rows": rows }),
            DictionaryError::Io { .. } => Value::Null,
        };
        ApiError::new(StatusCode::BAD_REQUEST, "bad_payload", e.to_string()).with_details(details)
    }
}

impl From<ReservoirError> for ApiError {
    fn from(e: ReservoirError) -> Self {
        let (status, code) = match &e {
            ReservoirError::UnknownReview(_) => (StatusCode::NOT_FOUND, "not_found"),
            ReservoirError::NotPending { .. } => (StatusCode::CONFLICT, "not_pending"),
            ReservoirError::InvalidConcept(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_concept"),
            ReservoirError::EmptyConcepts => (StatusCode::UNPROCESSABLE_ENTITY, "empty_concepts"),
            ReservoirError::Io { .. } | ReservoirError::Corrupt { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "storage")
            }
        };
        let mut err = ApiError::new(status, code, e.to_string());
        if let ReservoirError::NotPending { review_id, status } = e {
            err = err.with_details(json!({ "review_id": review_id, "status": status }));
        }
        err
    }
}
