use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use vrlab_core::flow::ValidationReport;
use vrlab_core::{ErrorKind, PlatformError};

/// Error body returned by every route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// `not_found`, `invalid`, `conflict`, `busy` or `unauthorized`.
    pub kind: String,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ValidationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after_ms: Option<u64>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::plain(StatusCode::UNPROCESSABLE_ENTITY, "invalid", msg)
    }

    pub fn unauthorized() -> Self {
        Self::plain(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
    }

    fn plain(status: StatusCode, kind: &str, msg: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                kind: kind.into(),
                error: msg.into(),
                report: None,
                retry_after_ms: None,
            },
        }
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        let (status, kind, retry) = match e.kind() {
            ErrorKind::NotFound => (StatusCode::NOT_FOUND, "not_found", None),
            ErrorKind::Invalid => (StatusCode::UNPROCESSABLE_ENTITY, "invalid", None),
            ErrorKind::Conflict => (StatusCode::CONFLICT, "conflict", None),
            ErrorKind::Busy { retry_after_ms } => (StatusCode::TOO_MANY_REQUESTS, "busy", Some(retry_after_ms)),
        };
        ApiError {
            status,
            body: ErrorBody {
                kind: kind.into(),
                error: e.to_string(),
                report: e.report().cloned(),
                retry_after_ms: retry,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let retry = self.body.retry_after_ms;
        let mut resp = (self.status, Json(self.body)).into_response();
        if let Some(ms) = retry {
            let secs = ms.div_ceil(1000).max(1);
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}
