//! Operator control over memory, mitigations and traces. Every mutation is
//! committed together with exactly one trace event attributed to a human.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{AuraError, Result};
use crate::memory::{AuditEvent, BulkOp, EntryPatch, InsertOutcome, MemoryBackend, MemoryEntry, MemoryExport};
use crate::mitigation::{Mitigation, MitigationRegistry};
use crate::trace::{Actor, EventKind, NewEvent, TraceEvent, TraceFilter, TraceStore};

/// Shared handles for one operator action.
pub struct A2hContext<'a> {
    pub memory: &'a dyn MemoryBackend,
    pub registry: &'a MitigationRegistry,
    pub traces: &'a TraceStore,
    pub now: DateTime<Utc>,
    /// Trace the edit event is filed under.
    pub trace_id: String,
}

fn require_human(actor: &Actor) -> Result<()> {
    if actor.is_human() {
        Ok(())
    } else {
        Err(AuraError::Precondition(format!(
            "operator edits need a human actor, got {actor}"
        )))
    }
}

impl A2hContext<'_> {
    fn event(&self, actor: &Actor, payload: serde_json::Value) -> NewEvent {
        NewEvent::new(&self.trace_id, EventKind::A2hEdit, actor.clone(), self.now, payload)
    }

    fn audit(&self, actor: &Actor, kind: &str, detail: serde_json::Value) -> AuditEvent {
        AuditEvent {
            at: self.now,
            actor: actor.to_string(),
            kind: kind.to_string(),
            detail,
        }
    }
}

/// Inserts an operator-authored entry. Near-duplicates are refused.
pub fn add_instance(ctx: &A2hContext<'_>, actor: &Actor, entry: MemoryEntry) -> Result<String> {
    match insert_instance(ctx, actor, entry)? {
        InsertOutcome::Accepted { entry_id } => Ok(entry_id),
        InsertOutcome::Rejected { duplicate_of, .. } => Err(AuraError::Duplicate { duplicate_of }),
    }
}

/// Like [`add_instance`] but reports a rejection with its similarity.
/// Rejections record no event.
pub fn insert_instance(ctx: &A2hContext<'_>, actor: &Actor, mut entry: MemoryEntry) -> Result<InsertOutcome> {
    require_human(actor)?;
    entry.audit.push(ctx.audit(actor, "created", json!({})));
    let (out, _) = ctx.traces.commit(|| {
        let out = ctx.memory.insert(entry)?;
        let events = match &out {
            InsertOutcome::Accepted { entry_id } => {
                vec![ctx.event(actor, json!({ "op": "add_instance", "entry_id": entry_id }))]
            }
            InsertOutcome::Rejected { .. } => Vec::new(),
        };
        Ok((out, events))
    })?;
    Ok(out)
}

pub fn update_instance(ctx: &A2hContext<'_>, actor: &Actor, entry_id: &str, patch: &EntryPatch) -> Result<MemoryEntry> {
    require_human(actor)?;
    if patch.is_empty() {
        return Err(AuraError::InvalidInput("patch changes nothing".into()));
    }
    let detail = serde_json::to_value(patch)?;
    let (entry, _) = ctx.traces.commit(|| {
        let e = ctx
            .memory
            .update(entry_id, patch, ctx.audit(actor, "updated", detail.clone()))?;
        let ev = ctx.event(actor, json!({ "op": "update_instance", "entry_id": entry_id, "patch": detail }));
        Ok((e, vec![ev]))
    })?;
    Ok(entry)
}

/// Writes `entry` under its id without the duplicate check.
pub fn replace_instance(ctx: &A2hContext<'_>, actor: &Actor, mut entry: MemoryEntry) -> Result<()> {
    require_human(actor)?;
    entry.audit.push(ctx.audit(actor, "replaced", json!({})));
    let id = entry.entry_id.clone();
    ctx.traces.commit(|| {
        ctx.memory.upsert(entry)?;
        Ok(((), vec![ctx.event(actor, json!({ "op": "replace_instance", "entry_id": id }))]))
    })?;
    Ok(())
}

pub fn delete_instance(ctx: &A2hContext<'_>, actor: &Actor, entry_id: &str) -> Result<()> {
    require_human(actor)?;
    ctx.traces.commit(|| {
        ctx.memory
            .delete(entry_id, ctx.audit(actor, "deleted", serde_json::Value::Null))?;
        Ok(((), vec![ctx.event(actor, json!({ "op": "delete_instance", "entry_id": entry_id }))]))
    })?;
    Ok(())
}

pub fn bulk(ctx: &A2hContext<'_>, actor: &Actor, op: BulkOp) -> Result<usize> {
    require_human(actor)?;
    let summary = serde_json::to_value(&op)?;
    let (n, _) = ctx.traces.commit(|| {
        let n = ctx.memory.bulk(op, ctx.now)?;
        Ok((n, vec![ctx.event(actor, json!({ "op": "bulk", "request": summary, "affected": n }))]))
    })?;
    Ok(n)
}

pub fn purge(ctx: &A2hContext<'_>, actor: &Actor) -> Result<usize> {
    require_human(actor)?;
    let (n, _) = ctx.traces.commit(|| {
        let n = ctx.memory.purge()?;
        Ok((n, vec![ctx.event(actor, json!({ "op": "purge", "removed": n }))]))
    })?;
    Ok(n)
}

/// Replaces the store with an exported document.
pub fn import(ctx: &A2hContext<'_>, actor: &Actor, doc: MemoryExport) -> Result<usize> {
    require_human(actor)?;
    let n = doc.entries.len();
    ctx.traces.commit(|| {
        ctx.memory.import(doc)?;
        Ok((n, vec![ctx.event(actor, json!({ "op": "import", "entries": n }))]))
    })?;
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MitigationOp {
    /// Fails if the id exists.
    Add,
    /// Fails if the id does not exist.
    Update,
    Upsert,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlOutcome {
    pub mitigation_id: String,
    pub op: MitigationOp,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Creates, modifies or deletes a registry entry. Deleting a mitigation
/// still linked from memory warns; the links stay and are skipped at
/// execution.
pub fn mitigations_control(
    ctx: &A2hContext<'_>,
    actor: &Actor,
    op: MitigationOp,
    mitigation_id: &str,
    spec: Option<Mitigation>,
) -> Result<ControlOutcome> {
    require_human(actor)?;
    let mut warnings = Vec::new();
    let (out, _) = ctx.traces.commit(|| {
        match op {
            MitigationOp::Delete => {
                ctx.registry.remove(mitigation_id)?;
                let linked = ctx
                    .memory
                    .list()?
                    .iter()
                    .filter(|e| e.mitigation_ids.iter().any(|m| m == mitigation_id))
                    .count();
                if linked > 0 {
                    warnings.push(format!(
                        "mitigation '{mitigation_id}' is still linked from {linked} memory entr{}",
                        if linked == 1 { "y" } else { "ies" }
                    ));
                }
            }
            _ => {
                let m = spec.clone().ok_or_else(|| AuraError::InvalidInput("mitigation body required".into()))?;
                if m.mitigation_id != mitigation_id {
                    return Err(AuraError::InvalidInput(format!(
                        "body id '{}' does not match '{mitigation_id}'",
                        m.mitigation_id
                    )));
                }
                let exists = ctx.registry.get(mitigation_id).is_some();
                match (op, exists) {
                    (MitigationOp::Add, true) => {
                        return Err(AuraError::Duplicate {
                            duplicate_of: mitigation_id.to_string(),
                        })
                    }
                    (MitigationOp::Update, false) => return Err(AuraError::not_found("mitigation", mitigation_id)),
                    _ => {}
                }
                ctx.registry.upsert(m)?;
            }
        }
        let ev = ctx.event(
            actor,
            json!({ "op": "mitigation", "action": op, "mitigation_id": mitigation_id, "spec": spec }),
        );
        Ok((
            ControlOutcome {
                mitigation_id: mitigation_id.to_string(),
                op,
                warnings: warnings.clone(),
            },
            vec![ev],
        ))
    })?;
    Ok(out)
}

pub fn read_trace(traces: &TraceStore, trace_id: &str) -> Result<Vec<TraceEvent>> {
    traces.read(trace_id)
}

pub fn query_traces(traces: &TraceStore, filter: &TraceFilter) -> Vec<TraceEvent> {
    traces.query(filter)
}
