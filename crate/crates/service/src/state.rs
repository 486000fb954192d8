use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, PoisonError};

use axum::body::Bytes;

use aura_core::home::Home;
use aura_core::Engine;

use crate::error::ApiError;
use crate::reply::Reply;

/// Stored outcome of an assessment sent with an `Idempotency-Key`.
#[derive(Debug, Clone)]
pub(crate) struct IdempotentRecord {
    pub body: Bytes,
    pub reply: Reply,
}

/// Shared state of a running service.
pub struct AppState {
    engine: Engine,
    home: Option<Home>,
    token: Option<String>,
    operator: String,
    requests: AtomicU64,
    /// Serialises every write to memory, mitigations, sessions and config.
    writer: Mutex<()>,
    pub(crate) idempotency: Mutex<HashMap<String, IdempotentRecord>>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("home", &self.home)
            .field("operator", &self.operator)
            .field("auth", &self.token.is_some())
            .finish_non_exhaustive()
    }
}

impl AppState {
    /// State over an engine. With a `home`, writes are persisted there.
    pub fn new(engine: Engine, home: Option<Home>) -> Self {
        AppState {
            engine,
            home,
            token: None,
            operator: "service".into(),
            requests: AtomicU64::new(0),
            writer: Mutex::new(()),
            idempotency: Mutex::new(HashMap::new()),
        }
    }

    /// Requires `Authorization: Bearer <token>` on protected routes.
    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    /// Human identity recorded for edits made with the token.
    pub fn with_operator(mut self, operator: impl Into<String>) -> Self {
        self.operator = operator.into();
        self
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn home(&self) -> Option<&Home> {
        self.home.as_ref()
    }

    pub fn operator(&self) -> &str {
        &self.operator
    }

    pub(crate) fn authorized(&self, header: Option<&str>) -> bool {
        match &self.token {
            None => true,
            Some(t) => header
                .and_then(|h| h.strip_prefix("Bearer "))
                .is_some_and(|given| given.trim() == t),
        }
    }

    pub(crate) fn next_request_id(&self) -> String {
        let n = self.requests.fetch_add(1, Ordering::Relaxed) + 1;
        format!("req-{n:06}")
    }

    /// Runs `f` as the only writer, then persists engine state.
    pub(crate) fn write<T>(&self, f: impl FnOnce(&Engine) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let _guard = self.writer.lock().unwrap_or_else(PoisonError::into_inner);
        let out = f(&self.engine);
        if let Some(home) = &self.home {
            home.save_state(&self.engine)?;
        }
        out
    }
}
