use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = AuraError> = std::result::Result<T, E>;

/// Errors raised by the assessment engine.
///
/// Every variant maps onto a stable machine code (see [`AuraError::code`])
/// which the CLI and the HTTP facade expose verbatim.
#[derive(Debug, Error)]
pub enum AuraError {
    #[error("invalid input: {} violation(s)", .0.len())]
    Validation(Vec<Violation>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("total dimension budget is zero")]
    DegenerateWeights,

    #[error("at least one dimension is required")]
    EmptyDimensionSet,

    #[error("no core dimension is active")]
    NoCoreDimensions,

    #[error("embedding has {got} components, store expects {expected}")]
    DimensionalityMismatch { expected: usize, got: usize },

    #[error("{kind} '{id}' not found")]
    NotFound { kind: &'static str, id: String },

    #[error("duplicate of {duplicate_of}")]
    Duplicate { duplicate_of: String },

    #[error("session '{0}' is no longer open")]
    StaleSession(String),

    #[error("memory entry '{0}' has expired")]
    StaleEntry(String),

    #[error("agent spec declares no tools")]
    EmptySpec,

    #[error("evaluator failure: {0}")]
    AdapterFailure(String),

    #[error("evaluator timed out: {0}")]
    AdapterTimeout(String),

    #[error("mitigation hook '{hook}' failed: {message}")]
    HookFailure { hook: String, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("storage failure: {0}")]
    Storage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AuraError {
    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        AuraError::NotFound { kind, id: id.into() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            AuraError::Validation(_) => "validation",
            AuraError::InvalidInput(_) => "invalid-input",
            AuraError::DegenerateWeights => "degenerate-weights",
            AuraError::EmptyDimensionSet => "empty-dimension-set",
            AuraError::NoCoreDimensions => "no-core-dimensions",
            AuraError::DimensionalityMismatch { .. } => "dimensionality-mismatch",
            AuraError::NotFound { .. } => "not-found",
            AuraError::Duplicate { .. } => "duplicate",
            AuraError::StaleSession(_) => "stale-session",
            AuraError::StaleEntry(_) => "stale-entry",
            AuraError::EmptySpec => "empty-spec",
            AuraError::AdapterFailure(_) => "adapter-failure",
            AuraError::AdapterTimeout(_) => "adapter-timeout",
            AuraError::HookFailure { .. } => "custom-hook-failure",
            AuraError::Precondition(_) => "precondition",
            AuraError::Config(_) => "config",
            AuraError::Storage(_) => "storage-failure",
            AuraError::Io(_) => "io-failure",
            AuraError::Json(_) => "invalid-json",
        }
    }

    /// True for errors caused by the caller's input rather than by the engine.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            AuraError::Storage(_)
                | AuraError::Io(_)
                | AuraError::AdapterFailure(_)
                | AuraError::AdapterTimeout(_)
                | AuraError::HookFailure { .. }
        )
    }

    /// Structured detail payload for API / CLI error documents.
    pub fn details(&self) -> serde_json::Value {
        match self {
            AuraError::Validation(v) => serde_json::json!({ "violations": v }),
            AuraError::Duplicate { duplicate_of } => {
                serde_json::json!({ "duplicate_of": duplicate_of })
            }
            AuraError::NotFound { kind, id } => serde_json::json!({ "kind": kind, "id": id }),
            AuraError::DimensionalityMismatch { expected, got } => {
                serde_json::json!({ "expected": expected, "got": got })
            }
            _ => serde_json::Value::Null,
        }
    }
}
