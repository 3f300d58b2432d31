use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ragforge_core::RunError;
use serde_json::{json, Value};

/// An HTTP error with a JSON body of the form `{"error": kind, ...}`.
#[derive(Debug, thiserror::Error)]
#[error("{status}: {body}")]
pub struct ApiError {
    pub status: StatusCode,
    pub body: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": kind, "message": message.into() }),
        }
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    pub fn bad_request(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        Self {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": "invalid", "field": field, "message": message }),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let message = e.to_string();
        match e {
            RunError::Schema { path, suggestion, .. } => Self {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": "schema", "field": path, "message": message, "suggestion": suggestion }),
            },
            RunError::Invalid { field, .. } => Self {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": "invalid", "field": field, "message": message }),
            },
            RunError::Axis { axis, .. } => Self {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": "invalid", "field": axis, "message": message }),
            },
            RunError::Preflight(failures) => Self {
                status: StatusCode::SERVICE_UNAVAILABLE,
                body: json!({ "error": "preflight", "message": message, "failures": failures }),
            },
            RunError::Corpus(_) | RunError::Dataset(_) | RunError::Index(_) | RunError::Judge(_) => {
                Self::new(StatusCode::BAD_REQUEST, "input", message)
            }
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
