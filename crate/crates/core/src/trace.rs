//! Append-only event trace of assessments and operator edits.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AuraError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ContextParsed,
    DimensionsSet,
    PairScored,
    ProfileBuilt,
    MitigationSelected,
    MitigationExecuted,
    HitlOpened,
    HitlApplied,
    MemoryHit,
    MemoryInsert,
    A2hEdit,
    /// Terminal event of every assessment run.
    RunCompleted,
}

impl EventKind {
    pub fn parse(s: &str) -> Option<EventKind> {
        serde_json::from_value(Value::String(s.to_string())).ok()
    }
}

/// Who caused an event. Serialized as `system`, `evaluator` or `human:<id>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Actor {
    System,
    Evaluator,
    Human(String),
}

impl Actor {
    pub fn human(id: &str) -> Self {
        Actor::Human(id.to_string())
    }

    pub fn is_human(&self) -> bool {
        matches!(self, Actor::Human(_))
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::System => f.write_str("system"),
            Actor::Evaluator => f.write_str("evaluator"),
            Actor::Human(id) => write!(f, "human:{id}"),
        }
    }
}

impl From<Actor> for String {
    fn from(a: Actor) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Actor {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "system" => Ok(Actor::System),
            "evaluator" => Ok(Actor::Evaluator),
            _ => match s.strip_prefix("human:") {
                Some(id) if !id.is_empty() => Ok(Actor::Human(id.to_string())),
                _ => Err(format!("unknown actor '{s}'")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Global append position.
    pub seq: u64,
    pub trace_id: String,
    pub kind: EventKind,
    pub actor: Actor,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub payload: Value,
}

/// An event before it is given its sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEvent {
    pub trace_id: String,
    pub kind: EventKind,
    pub actor: Actor,
    pub timestamp: DateTime<Utc>,
    pub payload: Value,
}

impl NewEvent {
    pub fn new(trace_id: &str, kind: EventKind, actor: Actor, timestamp: DateTime<Utc>, payload: Value) -> Self {
        NewEvent {
            trace_id: trace_id.to_string(),
            kind,
            actor,
            timestamp,
            payload,
        }
    }
}

/// `actor` accepts `system`, `evaluator`, `human` (any operator) or
/// `human:<id>`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<EventKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub since: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<DateTime<Utc>>,
}

impl TraceFilter {
    pub fn matches(&self, e: &TraceEvent) -> bool {
        self.trace_id.as_ref().is_none_or(|t| &e.trace_id == t)
            && self.kind.is_none_or(|k| e.kind == k)
            && self.since.is_none_or(|t| e.timestamp >= t)
            && self.until.is_none_or(|t| e.timestamp <= t)
            && self.actor.as_deref().is_none_or(|a| match a {
                "human" => e.actor.is_human(),
                other => e.actor.to_string() == other,
            })
    }
}

/// Ordered event log, optionally mirrored to a JSON-lines file.
#[derive(Debug, Default)]
pub struct TraceStore {
    events: RwLock<Vec<TraceEvent>>,
    writer: Mutex<Option<PathBuf>>,
}

impl TraceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut events = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: TraceEvent = serde_json::from_str(&line)
                    .map_err(|err| AuraError::Storage(format!("{} line {}: {err}", path.display(), i + 1)))?;
                events.push(e);
            }
        }
        Ok(TraceStore {
            events: RwLock::new(events),
            writer: Mutex::new(Some(path.to_path_buf())),
        })
    }

    /// Appends events in order. Returns the stored events.
    pub fn append(&self, batch: Vec<NewEvent>) -> Result<Vec<TraceEvent>> {
        self.commit(|| Ok(((), batch))).map(|(_, e)| e)
    }

    pub fn record(
        &self,
        trace_id: &str,
        kind: EventKind,
        actor: Actor,
        timestamp: DateTime<Utc>,
        payload: Value,
    ) -> Result<TraceEvent> {
        let mut out = self.append(vec![NewEvent::new(trace_id, kind, actor, timestamp, payload)])?;
        Ok(out.remove(0))
    }

    /// Runs a mutation and appends the events it reports while holding the
    /// append lock, so no other event can land between the two. Nothing is
    /// appended when the mutation fails.
    pub fn commit<T>(&self, mutation: impl FnOnce() -> Result<(T, Vec<NewEvent>)>) -> Result<(T, Vec<TraceEvent>)> {
        let writer = self.writer.lock().expect("trace writer");
        let (out, batch) = mutation()?;
        if batch.is_empty() {
            return Ok((out, Vec::new()));
        }
        let mut events = self.events.write().expect("trace lock");
        let mut seq = events.last().map(|e| e.seq + 1).unwrap_or(0);
        let stored: Vec<TraceEvent> = batch
            .into_iter()
            .map(|n| {
                let e = TraceEvent {
                    seq,
                    trace_id: n.trace_id,
                    kind: n.kind,
                    actor: n.actor,
                    timestamp: n.timestamp,
                    payload: n.payload,
                };
                seq += 1;
                e
            })
            .collect();
        if let Some(path) = writer.as_ref() {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut buf = String::new();
            for e in &stored {
                buf.push_str(&serde_json::to_string(e)?);
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())
                .map_err(|err| AuraError::Storage(format!("appending to {}: {err}", path.display())))?;
        }
        events.extend(stored.iter().cloned());
        Ok((out, stored))
    }

    /// Full ordered history of one trace.
    pub fn read(&self, trace_id: &str) -> Result<Vec<TraceEvent>> {
        let out: Vec<TraceEvent> = self
            .events
            .read()
            .expect("trace lock")
            .iter()
            .filter(|e| e.trace_id == trace_id)
            .cloned()
            .collect();
        if out.is_empty() {
            return Err(AuraError::not_found("trace", trace_id));
        }
        Ok(out)
    }

    pub fn query(&self, filter: &TraceFilter) -> Vec<TraceEvent> {
        self.events
            .read()
            .expect("trace lock")
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    pub fn trace_ids(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        self.events
            .read()
            .expect("trace lock")
            .iter()
            .filter(|e| seen.insert(e.trace_id.clone()))
            .map(|e| e.trace_id.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.events.read().expect("trace lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
