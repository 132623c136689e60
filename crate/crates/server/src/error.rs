// SPDX-License-Identifier: MIT OR Apache-2.0

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// JSON error body: `{code, message, details}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_owned(),
                message: message.into(),
                details: Value::Null,
            },
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.body.details = details;
        self
    }

    pub fn invalid(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no {what} with id {id:?}"))
            .with_details(serde_json::json!({ "id": id }))
    }
}

impl From<promptlens_core::Error> for ApiError {
    fn from(e: promptlens_core::Error) -> Self {
        use promptlens_core::Error as E;
        let status = if e.is_validation() {
            StatusCode::UNPROCESSABLE_ENTITY
        } else if matches!(e, E::Cancelled) {
            StatusCode::SERVICE_UNAVAILABLE
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        let details = match &e {
            E::SequenceTooLong { len, limit } => serde_json::json!({ "tokens": len, "limit": limit }),
            E::UnknownToken { id, vocab_size } => serde_json::json!({ "id": id, "vocab_size": vocab_size }),
            E::SegmentIndex { index, len } => serde_json::json!({ "index": index, "segments": len }),
            E::PromptSelection(index) => serde_json::json!({ "segment": index }),
            _ => Value::Null,
        };
        Self::new(status, e.code(), e.to_string()).with_details(details)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
