//! Response envelope: `{request_id, payload}` or `{request_id, error}`.

use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use serde::Serialize;
use serde_json::{json, Value};

use aura_core::AuraError;

use crate::error::ApiError;

tokio::task_local! {
    pub(crate) static REQUEST_ID: String;
}

fn request_id() -> String {
    REQUEST_ID.try_with(Clone::clone).unwrap_or_else(|_| "req-000000".into())
}

fn json_response(status: StatusCode, body: &Value) -> Response {
    let bytes = serde_json::to_vec(body).expect("values always serialise");
    let mut resp = (status, bytes).into_response();
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    resp
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: StatusCode,
    pub payload: Value,
    pub location: Option<String>,
    pub replayed: bool,
}

impl Reply {
    pub fn ok(payload: impl Serialize) -> Result<Reply, ApiError> {
        Reply::with_status(StatusCode::OK, payload)
    }

    pub fn created(payload: impl Serialize) -> Result<Reply, ApiError> {
        Reply::with_status(StatusCode::CREATED, payload)
    }

    pub fn with_status(status: StatusCode, payload: impl Serialize) -> Result<Reply, ApiError> {
        Ok(Reply {
            status,
            payload: serde_json::to_value(payload).map_err(AuraError::from)?,
            location: None,
            replayed: false,
        })
    }
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        let mut resp = json_response(self.status, &json!({ "request_id": request_id(), "payload": self.payload }));
        if let Some(loc) = self.location.as_deref().and_then(|l| HeaderValue::from_str(l).ok()) {
            resp.headers_mut().insert(header::LOCATION, loc);
        }
        if self.replayed {
            resp.headers_mut()
                .insert("idempotent-replayed", HeaderValue::from_static("true"));
        }
        resp
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(code = self.code(), error = %self, "request failed");
        }
        let body = json!({
            "request_id": request_id(),
            "error": { "code": self.code(), "message": self.to_string(), "details": self.details() },
        });
        json_response(status, &body)
    }
}

/// Raw JSON without the envelope, for probes and the OpenAPI document.
pub fn raw(body: &Value) -> Response {
    json_response(StatusCode::OK, body)
}
