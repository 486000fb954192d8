use axum::http::StatusCode;
use serde_json::{json, Value};
use thiserror::Error;

use aura_core::AuraError;

/// Failures reported by the HTTP layer. Library errors keep their code.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error(transparent)]
    Core(#[from] AuraError),

    #[error("missing or invalid bearer token")]
    Unauthorized,

    #[error("no route for {method} {path}")]
    NoRoute { method: String, path: String },

    #[error("method {method} is not allowed on {path}")]
    MethodNotAllowed { method: String, path: String },

    #[error("idempotency key '{0}' was already used with a different body")]
    IdempotencyConflict(String),

    /// Insert refused by the store, with the similarity that triggered it.
    #[error("duplicate of {duplicate_of}")]
    DuplicateEntry { duplicate_of: String, similarity: f64 },

    #[error("worker failed: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Core(e) => e.code(),
            ApiError::Unauthorized => "unauthorized",
            ApiError::NoRoute { .. } => "no-route",
            ApiError::MethodNotAllowed { .. } => "method-not-allowed",
            ApiError::IdempotencyConflict(_) => "idempotency-conflict",
            ApiError::DuplicateEntry { .. } => "duplicate",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Core(e) => core_status(e),
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::NoRoute { .. } => StatusCode::NOT_FOUND,
            ApiError::MethodNotAllowed { .. } => StatusCode::METHOD_NOT_ALLOWED,
            ApiError::IdempotencyConflict(_) | ApiError::DuplicateEntry { .. } => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn details(&self) -> Value {
        match self {
            ApiError::Core(e) => e.details(),
            ApiError::DuplicateEntry {
                duplicate_of,
                similarity,
            } => json!({ "duplicate_of": duplicate_of, "similarity": similarity }),
            ApiError::IdempotencyConflict(key) => json!({ "key": key }),
            _ => Value::Null,
        }
    }
}

fn core_status(e: &AuraError) -> StatusCode {
    match e {
        AuraError::NotFound { .. } => StatusCode::NOT_FOUND,
        AuraError::Duplicate { .. } | AuraError::StaleSession(_) | AuraError::StaleEntry(_) => StatusCode::CONFLICT,
        AuraError::AdapterFailure(_) | AuraError::HookFailure { .. } => StatusCode::BAD_GATEWAY,
        AuraError::AdapterTimeout(_) => StatusCode::GATEWAY_TIMEOUT,
        AuraError::Storage(_) | AuraError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}
