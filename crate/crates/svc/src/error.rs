use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::Serialize;
use thiserror::Error;

/// Error returned by a handler. The correlation middleware renders it as
/// `{"error": {"code", "message", "correlation_id"}}`.
#[derive(Clone, Debug, Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
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
        Self::new(StatusCode::CONFLICT, "duplicate_job", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<qrgmm::Error> for ApiError {
    fn from(e: qrgmm::Error) -> Self {
        use qrgmm::Error as E;
        let msg = e.to_string();
        match e {
            E::UnseenLevel { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unseen_level", msg)
            }
            E::Schema(_) => Self::new(StatusCode::BAD_REQUEST, "schema", msg),
            E::Domain(_) | E::Parameter(_) | E::Config(_) | E::Unsupported(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_request", msg)
            }
            E::Ingest { .. } | E::Csv(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_data", msg),
            E::Fit(_) | E::Training { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "fit_failed", msg)
            }
            E::Artifact(_) | E::Io(_) | E::Json(_) => Self::internal(msg),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

#[derive(Serialize)]
pub(crate) struct ErrorBody<'a> {
    pub error: ErrorDetail<'a>,
}

#[derive(Serialize)]
pub(crate) struct ErrorDetail<'a> {
    pub code: &'a str,
    pub message: &'a str,
    pub correlation_id: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        // The body is filled in by the correlation middleware, which knows
        // the request id.
        let mut res = self.status.into_response();
        res.extensions_mut().insert(self);
        res
    }
}
