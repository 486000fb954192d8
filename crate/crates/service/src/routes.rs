//! Declared endpoints and the OpenAPI document built from them.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteSpec {
    pub method: &'static str,
    pub path: &'static str,
    pub summary: &'static str,
    /// Whether the bearer token is required.
    pub auth: bool,
}

const fn r(method: &'static str, path: &'static str, summary: &'static str) -> RouteSpec {
    RouteSpec {
        method,
        path,
        summary,
        auth: true,
    }
}

const fn open(method: &'static str, path: &'static str, summary: &'static str) -> RouteSpec {
    RouteSpec {
        method,
        path,
        summary,
        auth: false,
    }
}

pub const ROUTES: &[RouteSpec] = &[
    r("POST", "/assess", "Assess one action; 202 when a review session is opened"),
    r("POST", "/agents/decompose", "Split an agent spec into one action per tool"),
    r("GET", "/memory/entries", "List live memory entries"),
    r("POST", "/memory/entries", "Insert an entry; 409 on a near-duplicate"),
    r("GET", "/memory/entries/{id}", "Read one entry"),
    r("PUT", "/memory/entries/{id}", "Write an entry without the duplicate check"),
    r("PATCH", "/memory/entries/{id}", "Edit fields of an entry"),
    r("DELETE", "/memory/entries/{id}", "Tombstone an entry"),
    r("POST", "/memory/bulk", "Bulk add, update or delete by selector"),
    r("GET", "/memory/stats", "Store statistics"),
    r("GET", "/memory/info", "Embedding size and thresholds of the store"),
    r("GET", "/memory/export", "Full store document"),
    r("POST", "/memory/import", "Replace the store with an exported document"),
    r("POST", "/memory/query", "Nearest entries for an embedding"),
    r("POST", "/memory/purge", "Hard delete of every entry and tombstone"),
    r("GET", "/mitigations", "List mitigations"),
    r("POST", "/mitigations", "Create a mitigation"),
    r("GET", "/mitigations/{id}", "Read one mitigation"),
    r("PUT", "/mitigations/{id}", "Create or replace a mitigation"),
    r("DELETE", "/mitigations/{id}", "Delete a mitigation"),
    r("POST", "/mitigations/{id}/run", "Run a mitigation on an action or on its linked entries"),
    r("GET", "/hitl/sessions", "List review sessions"),
    r("GET", "/hitl/sessions/{id}", "Read one review session"),
    r("POST", "/hitl/sessions/{id}/answers", "Answer a session and refine the run"),
    r("POST", "/hitl/sessions/{id}/abandon", "Close a session without edits"),
    r("GET", "/traces", "Trace events filtered by trace_id, actor, kind, since, until"),
    r("GET", "/traces/{id}", "Ordered events of one trace"),
    r("GET", "/config", "Current engine configuration"),
    r("PUT", "/config", "Replace the engine configuration"),
    r("PATCH", "/config", "Set one configuration key"),
    open("GET", "/healthz", "Liveness probe"),
    open("GET", "/version", "Build information"),
    open("GET", "/openapi.json", "This document"),
];

pub fn route_table() -> &'static [RouteSpec] {
    ROUTES
}

fn operation_id(spec: &RouteSpec) -> String {
    let mut id = spec.method.to_ascii_lowercase();
    for part in spec.path.split('/').filter(|p| !p.is_empty()) {
        id.push('_');
        id.push_str(&part.replace(['{', '}'], "").replace(['.', '-'], "_"));
    }
    id
}

pub fn openapi() -> Value {
    let mut paths: BTreeMap<&str, Map<String, Value>> = BTreeMap::new();
    for spec in ROUTES {
        let mut op = json!({
            "operationId": operation_id(spec),
            "summary": spec.summary,
            "responses": {
                "default": {
                    "description": "Envelope with request_id and either payload or error",
                    "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Envelope" } } }
                }
            }
        });
        if spec.path.contains("{id}") {
            op["parameters"] = json!([{ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } }]);
        }
        if matches!(spec.method, "POST" | "PUT" | "PATCH") {
            op["requestBody"] = json!({ "content": { "application/json": { "schema": { "type": "object" } } } });
        }
        if !spec.auth {
            op["security"] = json!([]);
        }
        paths
            .entry(spec.path)
            .or_default()
            .insert(spec.method.to_ascii_lowercase(), op);
    }
    json!({
        "openapi": "3.0.3",
        "info": { "title": "AURA risk assessment", "version": env!("CARGO_PKG_VERSION") },
        "security": [{ "bearer": [] }],
        "paths": paths,
        "components": {
            "securitySchemes": { "bearer": { "type": "http", "scheme": "bearer" } },
            "schemas": {
                "Envelope": {
                    "type": "object",
                    "required": ["request_id"],
                    "properties": {
                        "request_id": { "type": "string" },
                        "payload": {},
                        "error": {
                            "type": "object",
                            "properties": {
                                "code": { "type": "string" },
                                "message": { "type": "string" },
                                "details": {}
                            }
                        }
                    }
                }
            }
        }
    })
}
