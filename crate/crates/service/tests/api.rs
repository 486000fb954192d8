use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use aura_core::clock::FixedClock;
use aura_core::evaluator::FixtureTable;
use aura_core::memory::{InsertOutcome, MemoryBackend, MemoryEntry};
use aura_core::mitigation::{Mitigation, MitigationRegistry};
use aura_core::remote::RemoteMemoryStore;
use aura_core::{ActionRecord, AssessOptions, Engine, EngineConfig};
use aura_service::{router, AppState, ROUTES};

const TOKEN: &str = "s3cret";

fn fixture(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures/case_study")
        .join(name);
    std::fs::read_to_string(p).unwrap()
}

fn engine(cfg: EngineConfig) -> Engine {
    let ms: Vec<Mitigation> = serde_json::from_str(&fixture("mitigations.json")).unwrap();
    Engine::builder(cfg)
        .fixtures(FixtureTable::from_json_str(&fixture("evaluator.json")).unwrap())
        .mitigations(Arc::new(MitigationRegistry::new(ms).unwrap()))
        .clock(Arc::new(FixedClock(Utc.with_ymd_and_hms(2026, 3, 1, 18, 0, 0).unwrap())))
        .build()
        .unwrap()
}

fn app_with(cfg: EngineConfig) -> Router {
    let state = AppState::new(engine(cfg), None)
        .with_token(Some(TOKEN.into()))
        .with_operator("alice");
    router(Arc::new(state), &[])
}

fn app() -> Router {
    app_with(EngineConfig::default())
}

struct Resp {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Value,
}

async fn call(app: &Router, method: Method, path: &str, body: Option<Value>) -> Resp {
    call_with(app, method, path, body, &[]).await
}

async fn call_with(app: &Router, method: Method, path: &str, body: Option<Value>, extra: &[(&str, &str)]) -> Resp {
    let mut req = Request::builder()
        .method(method)
        .uri(path)
        .header(header::AUTHORIZATION, format!("Bearer {TOKEN}"))
        .header(header::CONTENT_TYPE, "application/json");
    for (k, v) in extra {
        req = req.header(*k, *v);
    }
    let body = body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty);
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    Resp { status, headers, body }
}

fn case_action() -> Value {
    serde_json::from_str(&fixture("action.json")).unwrap()
}

#[tokio::test]
async fn healthz_is_raw() {
    let r = call(&app(), Method::GET, "/healthz", None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body, json!({ "status": "ok" }));
}

#[tokio::test]
async fn missing_token_is_401() {
    let req = Request::get("/memory/stats").body(Body::empty()).unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(v["error"]["code"], "unauthorized");
    assert!(v["request_id"].as_str().unwrap().starts_with("req-"));
}

#[tokio::test]
async fn case_study_assessment_is_pending_review() {
    let app = app();
    let r = call(&app, Method::POST, "/assess", Some(case_action())).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let p = &r.body["payload"];
    assert!((p["gamma_norm"].as_f64().unwrap() - 58.0).abs() <= 0.5);
    assert_eq!(p["decision"], "rewrite");
    assert_eq!(p["mitigation_id"], "confirm_identity_and_email");
    assert_eq!(p["mitigation_steps"].as_array().unwrap().len(), 2);
    let session = p["hitl_session_id"].as_str().unwrap();
    assert_eq!(
        r.headers[header::LOCATION].to_str().unwrap(),
        format!("/hitl/sessions/{session}")
    );
    let s = call(&app, Method::GET, &format!("/hitl/sessions/{session}"), None).await;
    assert_eq!(s.body["payload"]["status"], "open");
    let done = call(&app, Method::POST, &format!("/hitl/sessions/{session}/answers"), Some(json!({ "answers": [] }))).await;
    assert_eq!(done.status, StatusCode::OK, "{}", done.body);
    assert_eq!(done.body["payload"]["assessment"]["status"], "completed");
    let again = call(&app, Method::POST, &format!("/hitl/sessions/{session}/answers"), Some(json!([]))).await;
    assert_eq!(again.status, StatusCode::CONFLICT);
    assert_eq!(again.body["error"]["code"], "stale-session");
}

#[tokio::test]
async fn wrapped_request_carries_options() {
    let cfg = EngineConfig {
        hitl_enabled: false,
        ..Default::default()
    };
    let app = app_with(cfg);
    let body = json!({ "action": case_action(), "options": { "auto_save": false } });
    let r = call(&app, Method::POST, "/assess", Some(body)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_eq!(r.body["payload"]["status"], "completed");
    let stats = call(&app, Method::GET, "/memory/stats", None).await;
    assert_eq!(stats.body["payload"]["count"], 0);
    let bad = call(&app, Method::POST, "/assess", Some(json!({ "action": case_action(), "extra": 1 }))).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn idempotency_key_replays_and_guards_body() {
    let app = app();
    let key = [("idempotency-key", "k-1")];
    let first = call_with(&app, Method::POST, "/assess", Some(case_action()), &key).await;
    let second = call_with(&app, Method::POST, "/assess", Some(case_action()), &key).await;
    assert_eq!(first.status, second.status);
    assert_eq!(first.body["payload"], second.body["payload"]);
    assert_eq!(second.headers["idempotent-replayed"], "true");
    let mut other = case_action();
    other["intent"] = json!("newsletter");
    let clash = call_with(&app, Method::POST, "/assess", Some(other), &key).await;
    assert_eq!(clash.status, StatusCode::CONFLICT);
    assert_eq!(clash.body["error"]["code"], "idempotency-conflict");
    let traces = call(&app, Method::GET, "/traces?kind=context_parsed", None).await;
    assert_eq!(traces.body["payload"].as_array().map(Vec::len), Some(1));
}

#[tokio::test]
async fn duplicate_insert_is_409_with_similarity() {
    let app = app();
    call(&app, Method::POST, "/assess", Some(case_action())).await;
    let list = call(&app, Method::GET, "/memory/entries", None).await;
    let mut entry = list.body["payload"][0].clone();
    let original = entry["entry_id"].as_str().unwrap().to_string();
    entry["entry_id"] = json!("mem-copy");
    let r = call(&app, Method::POST, "/memory/entries", Some(entry)).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.body["error"]["details"]["duplicate_of"], original.as_str());
    assert!(r.body["error"]["details"]["similarity"].as_f64().unwrap() >= 0.95);
}

#[tokio::test]
async fn edits_are_attributed_to_the_operator() {
    let app = app();
    call(&app, Method::POST, "/assess", Some(case_action())).await;
    let list = call(&app, Method::GET, "/memory/entries", None).await;
    let id = list.body["payload"][0]["entry_id"].as_str().unwrap().to_string();
    let path = format!("/memory/entries/{id}");
    let r = call_with(&app, Method::PATCH, &path, Some(json!({ "patch": { "notes": "checked" } })), &[("x-aura-operator", "bob")]).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_eq!(r.body["payload"]["notes"], "checked");
    let bare = call(&app, Method::PATCH, &path, Some(json!({ "status": "reviewed" }))).await;
    assert_eq!(bare.body["payload"]["status"], "reviewed");
    let bob = call(&app, Method::GET, "/traces?actor=human:bob", None).await;
    assert_eq!(bob.body["payload"].as_array().unwrap().len(), 1);
    let alice = call(&app, Method::GET, "/traces?actor=human:alice&kind=a2h_edit", None).await;
    assert_eq!(alice.body["payload"].as_array().unwrap().len(), 1);
    let del = call(&app, Method::DELETE, &path, None).await;
    assert_eq!(del.body["payload"]["deleted"], id.as_str());
    let gone = call(&app, Method::GET, &path, None).await;
    assert_eq!(gone.status, StatusCode::NOT_FOUND);
    assert_eq!(gone.body["error"]["code"], "not-found");
}

#[tokio::test]
async fn bad_bodies_and_filters_are_400() {
    let app = app();
    let r = call(&app, Method::POST, "/memory/bulk", Some(json!({ "op": "explode" }))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.body["error"]["code"], "invalid-input");
    let t = call(&app, Method::GET, "/traces?colour=red", None).await;
    assert_eq!(t.status, StatusCode::BAD_REQUEST);
    let raw = Request::post("/assess")
        .header(header::AUTHORIZATION, format!("Bearer {TOKEN}"))
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(app.clone().oneshot(raw).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn mitigation_crud_and_run() {
    let app = app();
    let m = json!({ "mitigation_id": "gate", "primitive": "threshold_gate", "params": { "block": 60, "warn": 30 } });
    let created = call(&app, Method::POST, "/mitigations", Some(m.clone())).await;
    assert_eq!(created.status, StatusCode::CREATED, "{}", created.body);
    let dup = call(&app, Method::POST, "/mitigations", Some(m)).await;
    assert_eq!(dup.status, StatusCode::CONFLICT);
    let got = call(&app, Method::GET, "/mitigations/gate", None).await;
    assert_eq!(got.body["payload"]["primitive"], "threshold_gate");
    let unlinked = call(&app, Method::POST, "/mitigations/gate/run", None).await;
    assert_eq!(unlinked.status, StatusCode::BAD_REQUEST);
    let run = call(&app, Method::POST, "/mitigations/gate/run", Some(case_action())).await;
    assert_eq!(run.status, StatusCode::OK, "{}", run.body);
    assert_eq!(run.body["payload"][0]["report"]["steps"][0]["decision"], "warn");
    let del = call(&app, Method::DELETE, "/mitigations/gate", None).await;
    assert_eq!(del.status, StatusCode::OK);
    assert_eq!(call(&app, Method::GET, "/mitigations/gate", None).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn config_patch_canonicalises_scale() {
    let app = app();
    let r = call(&app, Method::PATCH, "/config", Some(json!({ "key": "auto_save_threshold", "value": 0.9 }))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_eq!(r.body["payload"]["auto_save_threshold"], 90.0);
    let shown = call(&app, Method::GET, "/config", None).await;
    assert_eq!(shown.body["payload"]["auto_save_threshold"], 90.0);
    let mut cfg = shown.body["payload"].clone();
    cfg["auto_save_threshold"] = json!(95.0);
    let put = call(&app, Method::PUT, "/config", Some(cfg)).await;
    assert_eq!(put.body["payload"]["auto_save_threshold"], 95.0);
}

#[tokio::test]
async fn decompose_lists_one_action_per_tool() {
    let spec: Value = serde_json::from_str(&fixture("web_agent.json")).unwrap();
    let r = call(&app(), Method::POST, "/agents/decompose", Some(spec)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert!(!r.body["payload"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn every_declared_route_is_served() {
    let app = app();
    for spec in ROUTES {
        let path = spec.path.replace("{id}", "unknown-id");
        let method = Method::from_bytes(spec.method.as_bytes()).unwrap();
        let r = call(&app, method, &path, None).await;
        let code = r.body["error"]["code"].as_str().unwrap_or("");
        assert!(
            code != "no-route" && code != "method-not-allowed" && r.status != StatusCode::METHOD_NOT_ALLOWED,
            "{} {} -> {} {}",
            spec.method,
            spec.path,
            r.status,
            r.body
        );
    }
    let none = call(&app, Method::GET, "/nowhere", None).await;
    assert_eq!(none.body["error"]["code"], "no-route");
    let wrong = call(&app, Method::DELETE, "/assess", None).await;
    assert_eq!(wrong.status, StatusCode::METHOD_NOT_ALLOWED);
}

#[tokio::test]
async fn openapi_is_generated_from_the_table() {
    let r = call(&app(), Method::GET, "/openapi.json", None).await;
    assert_eq!(r.body["openapi"], "3.0.3");
    assert_eq!(r.body["paths"].as_object().unwrap().len(), {
        let mut paths: Vec<&str> = ROUTES.iter().map(|s| s.path).collect();
        paths.dedup();
        paths.len()
    });
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn remote_store_round_trip_over_tcp() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(aura_service::serve(listener, app(), async {
        let _ = stopped.await;
    }));
    let url = format!("http://{addr}");
    let out = tokio::task::spawn_blocking(move || {
        let store = Arc::new(RemoteMemoryStore::connect(&url, Some(TOKEN.into())).unwrap());
        assert!(RemoteMemoryStore::connect(&url, Some("wrong".into())).is_err());
        let client = Engine::builder(EngineConfig::default())
            .fixtures(FixtureTable::from_json_str(&fixture("evaluator.json")).unwrap())
            .memory(store.clone())
            .clock(Arc::new(FixedClock(Utc.with_ymd_and_hms(2026, 3, 1, 18, 0, 0).unwrap())))
            .build()
            .unwrap();
        let action: ActionRecord = serde_json::from_str(&fixture("action.json")).unwrap();
        let first = client.assess(&action, &AssessOptions::default()).unwrap();
        let saved = first.memory.saved_entry_id.clone().unwrap();
        let entry: MemoryEntry = store.get(&saved).unwrap();
        let mut copy = entry.clone();
        copy.entry_id = "mem-copy".into();
        let rejected = store.insert(copy).unwrap();
        let second = client.assess(&action, &AssessOptions::default()).unwrap();
        (saved, rejected, second, store.stats().unwrap().count, store.export().unwrap())
    })
    .await
    .unwrap();
    let (saved, rejected, second, count, export) = out;
    assert!(matches!(rejected, InsertOutcome::Rejected { ref duplicate_of, .. } if *duplicate_of == saved));
    assert_eq!(second.memory.entry_id.as_deref(), Some(saved.as_str()));
    assert_eq!(second.evaluator_calls.score_pair, 0);
    assert_eq!(count, 1);
    assert_eq!(export.entries.len(), 1);
    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
}
