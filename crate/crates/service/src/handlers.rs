use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode, Uri};
use axum::response::Response;
use axum::Extension;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use aura_core::a2h::{self, MitigationOp};
use aura_core::batch::{decompose_agent, AgentSpec};
use aura_core::hitl::Answer;
use aura_core::memory::{BulkOp, EntryPatch, InsertOutcome, MemoryEntry, MemoryExport, QueryRequest, StoreInfo};
use aura_core::mitigation::Mitigation;
use aura_core::pipeline::AssessmentStatus;
use aura_core::trace::{Actor, TraceFilter};
use aura_core::{ActionRecord, AssessOptions, AuraError, EngineConfig};

use crate::error::ApiError;
use crate::reply::{raw, Reply};
use crate::routes;
use crate::state::{AppState, IdempotentRecord};

type Shared = State<Arc<AppState>>;
type ApiResult = Result<Reply, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn parse<T: DeserializeOwned>(body: &[u8], what: &str) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| AuraError::InvalidInput(format!("{what}: {e}")).into())
}

fn parse_value(body: &[u8], what: &str) -> Result<Value, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Value::Null);
    }
    parse(body, what)
}

fn from_value<T: DeserializeOwned>(v: Value, what: &str) -> Result<T, ApiError> {
    serde_json::from_value(v).map_err(|e| AuraError::InvalidInput(format!("{what}: {e}")).into())
}

/// A bare action record, or `{action: {...}, options: {...}}`. A record's own
/// `action` field is a string, which tells the two apart.
fn action_request(v: Value) -> Result<(ActionRecord, AssessOptions), ApiError> {
    match v {
        Value::Object(mut m) if m.get("action").is_some_and(Value::is_object) => {
            let action = from_value(m.remove("action").unwrap_or_default(), "action")?;
            let opts = match m.remove("options") {
                Some(o) => from_value(o, "options")?,
                None => AssessOptions::default(),
            };
            if let Some(k) = m.keys().next() {
                return Err(AuraError::InvalidInput(format!("unknown field '{k}' next to action")).into());
            }
            Ok((action, opts))
        }
        other => Ok((from_value(other, "action record")?, AssessOptions::default())),
    }
}

pub async fn assess(State(st): Shared, headers: HeaderMap, body: Bytes) -> ApiResult {
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    blocking(move || {
        st.write(|engine| {
            if let Some(k) = &key {
                let seen = st.idempotency.lock().expect("idempotency map").get(k).cloned();
                if let Some(prev) = seen {
                    if prev.body != body {
                        return Err(ApiError::IdempotencyConflict(k.clone()));
                    }
                    return Ok(Reply { replayed: true, ..prev.reply });
                }
            }
            let (action, opts) = action_request(parse_value(&body, "request body")?)?;
            let a = engine.assess(&action, &opts)?;
            let mut reply = Reply::ok(&a)?;
            if a.status == AssessmentStatus::PendingHitl {
                reply.status = StatusCode::ACCEPTED;
                reply.location = a.hitl_session_id.as_ref().map(|s| format!("/hitl/sessions/{s}"));
            }
            if let Some(k) = key {
                let record = IdempotentRecord {
                    body,
                    reply: reply.clone(),
                };
                st.idempotency.lock().expect("idempotency map").insert(k, record);
            }
            Ok(reply)
        })
    })
    .await
}

pub async fn decompose(body: Bytes) -> ApiResult {
    let spec: AgentSpec = parse(&body, "agent spec")?;
    Reply::ok(decompose_agent(&spec)?)
}

pub async fn list_entries(State(st): Shared) -> ApiResult {
    blocking(move || Reply::ok(st.engine().memory().list()?)).await
}

pub async fn add_entry(State(st): Shared, Extension(actor): Extension<Actor>, body: Bytes) -> ApiResult {
    let entry: MemoryEntry = parse(&body, "memory entry")?;
    blocking(move || {
        st.write(|engine| match a2h::insert_instance(&engine.a2h(None), &actor, entry)? {
            InsertOutcome::Accepted { entry_id } => Reply::created(json!({ "entry_id": entry_id })),
            InsertOutcome::Rejected {
                duplicate_of,
                similarity,
            } => Err(ApiError::DuplicateEntry {
                duplicate_of,
                similarity,
            }),
        })
    })
    .await
}

pub async fn get_entry(State(st): Shared, Path(id): Path<String>) -> ApiResult {
    blocking(move || Reply::ok(st.engine().memory().get(&id)?)).await
}

pub async fn put_entry(
    State(st): Shared,
    Extension(actor): Extension<Actor>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let entry: MemoryEntry = parse(&body, "memory entry")?;
    if entry.entry_id != id {
        return Err(AuraError::InvalidInput(format!("body entry_id '{}' does not match '{id}'", entry.entry_id)).into());
    }
    blocking(move || {
        st.write(|engine| {
            a2h::replace_instance(&engine.a2h(None), &actor, entry)?;
            Reply::ok(json!({ "entry_id": id }))
        })
    })
    .await
}

/// `{"patch": {...}}` or a bare patch.
pub async fn patch_entry(
    State(st): Shared,
    Extension(actor): Extension<Actor>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let value = parse_value(&body, "patch")?;
    let patch: EntryPatch = match value {
        Value::Object(mut m) if m.len() == 1 && m.contains_key("patch") => from_value(m.remove("patch").unwrap_or_default(), "patch")?,
        other => from_value(other, "patch")?,
    };
    blocking(move || st.write(|engine| Reply::ok(a2h::update_instance(&engine.a2h(None), &actor, &id, &patch)?))).await
}

pub async fn delete_entry(State(st): Shared, Extension(actor): Extension<Actor>, Path(id): Path<String>) -> ApiResult {
    blocking(move || {
        st.write(|engine| {
            a2h::delete_instance(&engine.a2h(None), &actor, &id)?;
            Reply::ok(json!({ "deleted": id }))
        })
    })
    .await
}

pub async fn bulk(State(st): Shared, Extension(actor): Extension<Actor>, body: Bytes) -> ApiResult {
    let op: BulkOp = parse(&body, "bulk request")?;
    blocking(move || {
        st.write(|engine| {
            let n = a2h::bulk(&engine.a2h(None), &actor, op)?;
            Reply::ok(json!({ "affected": n }))
        })
    })
    .await
}

pub async fn stats(State(st): Shared) -> ApiResult {
    blocking(move || Reply::ok(st.engine().memory().stats()?)).await
}

pub async fn info(State(st): Shared) -> ApiResult {
    let memory = st.engine().memory();
    Reply::ok(StoreInfo {
        dimensionality: memory.dimensionality(),
        config: memory.config(),
    })
}

pub async fn export(State(st): Shared) -> ApiResult {
    blocking(move || Reply::ok(st.engine().memory().export()?)).await
}

pub async fn import(State(st): Shared, Extension(actor): Extension<Actor>, body: Bytes) -> ApiResult {
    let doc: MemoryExport = parse(&body, "memory document")?;
    blocking(move || {
        st.write(|engine| {
            let n = a2h::import(&engine.a2h(None), &actor, doc)?;
            Reply::ok(json!({ "imported": n }))
        })
    })
    .await
}

pub async fn query(State(st): Shared, body: Bytes) -> ApiResult {
    let q: QueryRequest = parse(&body, "query")?;
    blocking(move || Reply::ok(st.engine().memory().query(&q.embedding, q.k)?)).await
}

pub async fn purge(State(st): Shared, Extension(actor): Extension<Actor>) -> ApiResult {
    blocking(move || {
        st.write(|engine| {
            let n = a2h::purge(&engine.a2h(None), &actor)?;
            Reply::ok(json!({ "purged": n }))
        })
    })
    .await
}

pub async fn list_mitigations(State(st): Shared) -> ApiResult {
    Reply::ok(&*st.engine().mitigations().snapshot())
}

fn mitigation_body(body: &[u8]) -> Result<Mitigation, ApiError> {
    Ok(Mitigation::from_json(&parse_value(body, "mitigation")?)?)
}

fn control(st: &AppState, actor: &Actor, op: MitigationOp, id: &str, m: Option<Mitigation>) -> Result<Value, ApiError> {
    st.write(|engine| {
        let out = a2h::mitigations_control(&engine.a2h(None), actor, op, id, m)?;
        Ok(serde_json::to_value(out).map_err(AuraError::from)?)
    })
}

pub async fn add_mitigation(State(st): Shared, Extension(actor): Extension<Actor>, body: Bytes) -> ApiResult {
    let m = mitigation_body(&body)?;
    blocking(move || {
        let id = m.mitigation_id.clone();
        Reply::created(control(&st, &actor, MitigationOp::Add, &id, Some(m))?)
    })
    .await
}

pub async fn get_mitigation(State(st): Shared, Path(id): Path<String>) -> ApiResult {
    match st.engine().mitigations().get(&id) {
        Some(m) => Reply::ok(m),
        None => Err(AuraError::not_found("mitigation", id).into()),
    }
}

pub async fn put_mitigation(
    State(st): Shared,
    Extension(actor): Extension<Actor>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let m = mitigation_body(&body)?;
    blocking(move || Reply::ok(control(&st, &actor, MitigationOp::Upsert, &id, Some(m))?)).await
}

pub async fn delete_mitigation(
    State(st): Shared,
    Extension(actor): Extension<Actor>,
    Path(id): Path<String>,
) -> ApiResult {
    blocking(move || Reply::ok(control(&st, &actor, MitigationOp::Delete, &id, None)?)).await
}

/// With an action in the body, assesses it and runs the mitigation on the
/// resulting profile. With an empty body, runs it on every saved entry
/// that links it.
pub async fn run_mitigation(State(st): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let request = match parse_value(&body, "request body")? {
        Value::Null => None,
        Value::Object(m) if m.is_empty() => None,
        other => Some(action_request(other)?),
    };
    blocking(move || {
        st.write(|engine| {
            let m = engine
                .mitigations()
                .get(&id)
                .ok_or_else(|| AuraError::not_found("mitigation", id.clone()))?;
            let mut runs = Vec::new();
            match request {
                Some((action, opts)) => {
                    let a = engine.assess(&action, &opts)?;
                    let report = engine.run_mitigations(std::slice::from_ref(&m), &action, &a.profile);
                    runs.push(json!({ "action_id": action.action_id, "trace_id": a.profile.trace_id, "report": report }));
                }
                None => {
                    for e in engine.memory().list()? {
                        let Some(stored) = e.assessment.as_ref() else { continue };
                        if !e.mitigation_ids.contains(&id) {
                            continue;
                        }
                        let report = engine.run_mitigations(std::slice::from_ref(&m), &e.action_snapshot, &stored.profile);
                        runs.push(json!({ "entry_id": e.entry_id, "action_id": e.action_snapshot.action_id, "report": report }));
                    }
                    if runs.is_empty() {
                        return Err(AuraError::Precondition(format!(
                            "mitigation '{id}' is not linked to any saved action; send an action"
                        ))
                        .into());
                    }
                }
            }
            Reply::ok(runs)
        })
    })
    .await
}

pub async fn list_sessions(State(st): Shared) -> ApiResult {
    let mut sessions = st.engine().sessions().list();
    sessions.sort_by_key(|s| !s.is_open());
    Reply::ok(sessions)
}

pub async fn get_session(State(st): Shared, Path(id): Path<String>) -> ApiResult {
    Reply::ok(st.engine().sessions().get(&id)?)
}

/// A list of answers or `{"answers": [...]}`.
pub async fn answer_session(
    State(st): Shared,
    Extension(actor): Extension<Actor>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let list = match parse_value(&body, "answers")? {
        Value::Object(mut m) if m.contains_key("answers") => m.remove("answers").unwrap_or_default(),
        other => other,
    };
    let answers: Vec<Answer> = from_value(list, "answers")?;
    blocking(move || st.write(|engine| Reply::ok(engine.answer(&id, &answers, &actor)?))).await
}

pub async fn abandon_session(
    State(st): Shared,
    Extension(actor): Extension<Actor>,
    Path(id): Path<String>,
) -> ApiResult {
    blocking(move || st.write(|engine| Reply::ok(engine.abandon(&id, &actor)?))).await
}

pub async fn list_traces(State(st): Shared, uri: Uri) -> ApiResult {
    let Query(filter) = Query::<TraceFilter>::try_from_uri(&uri)
        .map_err(|e| AuraError::InvalidInput(format!("trace filter: {}", e.body_text())))?;
    Reply::ok(a2h::query_traces(st.engine().traces(), &filter))
}

pub async fn get_trace(State(st): Shared, Path(id): Path<String>) -> ApiResult {
    Reply::ok(a2h::read_trace(st.engine().traces(), &id)?)
}

pub async fn get_config(State(st): Shared) -> ApiResult {
    Reply::ok(&*st.engine().config())
}

pub async fn put_config(State(st): Shared, body: Bytes) -> ApiResult {
    let cfg: EngineConfig = parse(&body, "configuration")?;
    blocking(move || {
        st.write(|engine| {
            engine.set_config(cfg.clone())?;
            if let Some(home) = st.home() {
                home.save_config(&cfg)?;
            }
            Reply::ok(&cfg)
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigPatch {
    key: String,
    value: Value,
}

pub async fn patch_config(State(st): Shared, body: Bytes) -> ApiResult {
    let p: ConfigPatch = parse(&body, "config patch")?;
    let raw = match &p.value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    blocking(move || {
        st.write(|engine| {
            if let Some(home) = st.home() {
                let mut stored = home.stored_config()?;
                stored.set(&p.key, &raw)?;
                home.save_config(&stored)?;
            }
            let cfg = engine.update_config(|c| c.set(&p.key, &raw))?;
            Reply::ok(&*cfg)
        })
    })
    .await
}

pub async fn healthz() -> Response {
    raw(&json!({ "status": "ok" }))
}

pub async fn version() -> ApiResult {
    Reply::ok(json!({
        "name": "aura-service",
        "version": env!("CARGO_PKG_VERSION"),
        "memory_format": 1,
    }))
}

pub async fn openapi() -> Response {
    raw(&routes::openapi())
}
