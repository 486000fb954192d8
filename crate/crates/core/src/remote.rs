//! Memory backend that talks to a self-hosted service over HTTP.

use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::error::{AuraError, Result};
use crate::memory::{
    AuditEvent, BulkOp, EntryPatch, InsertOutcome, MatchResult, MemoryBackend, MemoryConfig, MemoryEntry,
    MemoryExport, MemoryStats, QueryRequest, StoreInfo,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Get,
    Post,
    Put,
    Patch,
    Delete,
}

pub struct RemoteMemoryStore {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
    info: StoreInfo,
}

impl std::fmt::Debug for RemoteMemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteMemoryStore")
            .field("base", &self.base)
            .field("info", &self.info)
            .finish_non_exhaustive()
    }
}

impl RemoteMemoryStore {
    /// Connects and reads the store's dimensionality and thresholds.
    pub fn connect(base_url: &str, token: Option<String>) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        let mut store = RemoteMemoryStore {
            base: base_url.trim_end_matches('/').to_string(),
            token,
            agent,
            info: StoreInfo {
                dimensionality: 0,
                config: MemoryConfig::default(),
            },
        };
        store.info = store.call(Method::Get, "/memory/info", None)?;
        Ok(store)
    }

    fn send(&self, method: Method, path: &str, body: Option<&Value>) -> Result<(u16, Value)> {
        let url = format!("{}{path}", self.base);
        let auth = self.token.as_ref().map(|t| format!("Bearer {t}"));
        macro_rules! go {
            ($req:expr, body) => {{
                let mut r = $req;
                if let Some(a) = &auth {
                    r = r.header("Authorization", a);
                }
                r.send_json(body.unwrap_or(&Value::Null))
            }};
            ($req:expr) => {{
                let mut r = $req;
                if let Some(a) = &auth {
                    r = r.header("Authorization", a);
                }
                r.call()
            }};
        }
        let resp = match method {
            Method::Get => go!(self.agent.get(&url)),
            Method::Delete => go!(self.agent.delete(&url)),
            Method::Post => go!(self.agent.post(&url), body),
            Method::Put => go!(self.agent.put(&url), body),
            Method::Patch => go!(self.agent.patch(&url), body),
        };
        let mut resp = resp.map_err(|e| AuraError::Storage(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AuraError::Storage(format!("{url}: {e}")))?;
        let value = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).map_err(|e| AuraError::Storage(format!("{url}: malformed response: {e}")))?
        };
        Ok((status, value))
    }

    fn call<T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&Value>) -> Result<T> {
        let (status, doc) = self.send(method, path, body)?;
        if !(200..300).contains(&status) {
            return Err(remote_error(status, &doc));
        }
        let payload = doc.get("payload").cloned().unwrap_or(Value::Null);
        serde_json::from_value(payload).map_err(|e| AuraError::Storage(format!("{path}: unexpected payload: {e}")))
    }
}

fn remote_error(status: u16, doc: &Value) -> AuraError {
    let err = doc.get("error").cloned().unwrap_or(Value::Null);
    let message = err
        .get("message")
        .and_then(Value::as_str)
        .unwrap_or("no message")
        .to_string();
    let details = err.get("details").cloned().unwrap_or(Value::Null);
    let detail_str = |k: &str| details.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
    match err.get("code").and_then(Value::as_str) {
        Some("not-found") => AuraError::not_found("memory entry", detail_str("id")),
        Some("duplicate") => AuraError::Duplicate {
            duplicate_of: detail_str("duplicate_of"),
        },
        Some("dimensionality-mismatch") => AuraError::DimensionalityMismatch {
            expected: details.get("expected").and_then(Value::as_u64).unwrap_or(0) as usize,
            got: details.get("got").and_then(Value::as_u64).unwrap_or(0) as usize,
        },
        Some(code) if status < 500 => AuraError::InvalidInput(format!("remote {code}: {message}")),
        _ => AuraError::Storage(format!("remote status {status}: {message}")),
    }
}

fn entry_path(id: &str) -> String {
    format!("/memory/entries/{}", encode(id))
}

fn encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl MemoryBackend for RemoteMemoryStore {
    fn dimensionality(&self) -> usize {
        self.info.dimensionality
    }

    fn config(&self) -> MemoryConfig {
        self.info.config
    }

    fn query(&self, embedding: &[f64], k: usize) -> Result<MatchResult> {
        let body = serde_json::to_value(QueryRequest {
            embedding: embedding.to_vec(),
            k,
        })?;
        self.call(Method::Post, "/memory/query", Some(&body))
    }

    fn get(&self, entry_id: &str) -> Result<MemoryEntry> {
        self.call(Method::Get, &entry_path(entry_id), None)
    }

    fn insert(&self, entry: MemoryEntry) -> Result<InsertOutcome> {
        let body = serde_json::to_value(&entry)?;
        let (status, doc) = self.send(Method::Post, "/memory/entries", Some(&body))?;
        if status == 409 {
            let details = &doc["error"]["details"];
            return Ok(InsertOutcome::Rejected {
                duplicate_of: details["duplicate_of"].as_str().unwrap_or_default().to_string(),
                similarity: details["similarity"].as_f64().unwrap_or(f64::NAN),
            });
        }
        if !(200..300).contains(&status) {
            return Err(remote_error(status, &doc));
        }
        Ok(InsertOutcome::Accepted {
            entry_id: doc["payload"]["entry_id"]
                .as_str()
                .unwrap_or(&entry.entry_id)
                .to_string(),
        })
    }

    fn upsert(&self, entry: MemoryEntry) -> Result<()> {
        let body = serde_json::to_value(&entry)?;
        let _: Value = self.call(Method::Put, &entry_path(&entry.entry_id), Some(&body))?;
        Ok(())
    }

    /// The service writes its own audit event for the caller's token.
    fn update(&self, entry_id: &str, patch: &EntryPatch, _audit: AuditEvent) -> Result<MemoryEntry> {
        let body = json!({ "patch": patch });
        self.call(Method::Patch, &entry_path(entry_id), Some(&body))
    }

    fn delete(&self, entry_id: &str, _audit: AuditEvent) -> Result<()> {
        let _: Value = self.call(Method::Delete, &entry_path(entry_id), None)?;
        Ok(())
    }

    fn bulk(&self, op: BulkOp, _now: DateTime<Utc>) -> Result<usize> {
        let body = serde_json::to_value(op)?;
        let out: Value = self.call(Method::Post, "/memory/bulk", Some(&body))?;
        Ok(out["affected"].as_u64().unwrap_or(0) as usize)
    }

    fn list(&self) -> Result<Vec<MemoryEntry>> {
        self.call(Method::Get, "/memory/entries", None)
    }

    fn export(&self) -> Result<MemoryExport> {
        self.call(Method::Get, "/memory/export", None)
    }

    fn import(&self, doc: MemoryExport) -> Result<()> {
        let body = serde_json::to_value(doc)?;
        let _: Value = self.call(Method::Post, "/memory/import", Some(&body))?;
        Ok(())
    }

    fn stats(&self) -> Result<MemoryStats> {
        self.call(Method::Get, "/memory/stats", None)
    }

    fn purge(&self) -> Result<usize> {
        let out: Value = self.call(Method::Post, "/memory/purge", Some(&Value::Null))?;
        Ok(out["purged"].as_u64().unwrap_or(0) as usize)
    }
}
