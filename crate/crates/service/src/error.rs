use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use cxrlab_core::corpus::CorpusError;
use cxrlab_core::harness::HarnessError;
use cxrlab_core::labeler::LabelError;
use cxrlab_core::reference::ReferenceError;

/// JSON error body: `{"error": <violated invariant>, "message": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, error: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            message: message.into(),
        }
    }

    pub fn bad_request(error: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error, message)
    }

    pub fn not_found(error: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, error, message)
    }

    pub fn conflict(error: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, error, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

/// Enum variant name of an error, e.g. `InvalidQuorum`.
fn variant<E: std::fmt::Debug>(e: &E) -> String {
    let debug = format!("{e:?}");
    debug
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or_default()
        .to_string()
}

impl From<ReferenceError> for ApiError {
    fn from(e: ReferenceError) -> Self {
        Self::bad_request(variant(&e), e.to_string())
    }
}

impl From<CorpusError> for ApiError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Io", e.to_string()),
            _ => Self::bad_request(variant(&e), e.to_string()),
        }
    }
}

impl From<LabelError> for ApiError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::InvalidConfig(_) => Self::bad_request("InvalidConfig", e.to_string()),
            _ => Self::new(StatusCode::BAD_GATEWAY, variant(&e), e.to_string()),
        }
    }
}

impl From<HarnessError> for ApiError {
    fn from(e: HarnessError) -> Self {
        use HarnessError as H;
        match e {
            H::Label(inner) => inner.into(),
            H::Reference(inner) => inner.into(),
            H::FrozenVersionViolation(_) => Self::conflict("FrozenVersionViolation", e.to_string()),
            H::UnknownVersion(_) | H::UnknownRun(_) => Self::not_found(variant(&e), e.to_string()),
            H::TooManyFailures { .. } => Self::new(StatusCode::BAD_GATEWAY, "TooManyFailures", e.to_string()),
            H::Io(_) | H::Json(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, variant(&e), e.to_string()),
            H::Metric(ref inner) => Self::bad_request(variant(inner), e.to_string()),
            H::Matrix(ref inner) => Self::bad_request(variant(inner), e.to_string()),
            _ => Self::bad_request(variant(&e), e.to_string()),
        }
    }
}
