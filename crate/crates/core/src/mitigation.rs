//! Mitigation registry, selection policy, primitive semantics and the
//! execution chain. Preference policies (stored per user and intent) are
//! applied here too.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AuraError, Result};
use crate::model::{to_percent_scale, ActionRecord, Decision, PairKey, RiskProfile};
use crate::profiling::ThresholdPolicy;
use crate::scoring::GammaResult;
use crate::trigger::{TriggerExpr, TriggerInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Grounding,
    Guardrail,
    ThresholdGate,
    AgentReview,
    RoleEscalation,
    MemoryOverride,
    MetaLogic,
    Custom,
}

impl Primitive {
    pub fn as_str(&self) -> &'static str {
        match self {
            Primitive::Grounding => "grounding",
            Primitive::Guardrail => "guardrail",
            Primitive::ThresholdGate => "threshold_gate",
            Primitive::AgentReview => "agent_review",
            Primitive::RoleEscalation => "role_escalation",
            Primitive::MemoryOverride => "memory_override",
            Primitive::MetaLogic => "meta_logic",
            Primitive::Custom => "custom",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationProvenance {
    Memory,
    ModelProposed,
    Hitl,
    #[default]
    Rule,
}

/// A trigger-action pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mitigation {
    pub mitigation_id: String,
    pub primitive: Primitive,
    #[serde(default)]
    pub trigger: TriggerExpr,
    #[serde(default)]
    pub params: serde_json::Map<String, Value>,
    #[serde(default)]
    pub steps: Vec<String>,
    #[serde(default)]
    pub rewrite_capable: bool,
    /// Lower ranks are stronger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<u32>,
    #[serde(default)]
    pub provenance: MitigationProvenance,
}

fn param_str<'a>(params: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a str> {
    params.get(key).and_then(Value::as_str)
}

fn param_num(params: &serde_json::Map<String, Value>, key: &str) -> Option<f64> {
    params.get(key).and_then(Value::as_f64)
}

impl Mitigation {
    pub fn new(id: &str, primitive: Primitive) -> Self {
        Mitigation {
            mitigation_id: id.to_string(),
            primitive,
            trigger: TriggerExpr::always(),
            params: serde_json::Map::new(),
            steps: Vec::new(),
            rewrite_capable: false,
            importance: None,
            provenance: MitigationProvenance::Rule,
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn with_trigger(mut self, trigger: TriggerExpr) -> Self {
        self.trigger = trigger;
        self
    }

    pub fn with_steps(mut self, steps: &[&str]) -> Self {
        self.steps = steps.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let m: Mitigation = serde_json::from_value(value.clone())
            .map_err(|e| AuraError::InvalidInput(format!("mitigation does not parse: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Trigger and primitive parameter checks.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AuraError::InvalidInput(format!("{}: {msg}", self.mitigation_id)));
        if self.mitigation_id.trim().is_empty() {
            return Err(AuraError::InvalidInput("mitigation_id is empty".into()));
        }
        self.trigger.validate()?;
        let p = &self.params;
        match self.primitive {
            Primitive::Grounding => {
                if p.get("snippet").is_some_and(|v| !v.is_string()) {
                    return bad("grounding snippet must be a string".into());
                }
            }
            Primitive::Guardrail => {
                let forbid_ok = match p.get("forbid") {
                    None => true,
                    Some(Value::Array(xs)) => xs.iter().all(Value::is_string),
                    Some(_) => false,
                };
                if !forbid_ok {
                    return bad("guardrail forbid must be a list of strings".into());
                }
                if p.get("require_confirmation").is_some_and(|v| !v.is_boolean()) {
                    return bad("require_confirmation must be a boolean".into());
                }
                if !p.contains_key("forbid") && !p.contains_key("require_confirmation") {
                    return bad("guardrail needs forbid or require_confirmation".into());
                }
            }
            Primitive::ThresholdGate => {
                let (Some(block), Some(warn)) = (gate_value(p, "block"), gate_value(p, "warn")) else {
                    return bad("threshold_gate needs numeric block and warn on 0-100 or 0.0-1.0".into());
                };
                if warn > block {
                    return bad(format!("warn {warn} above block {block}"));
                }
            }
            Primitive::AgentReview => {
                if param_str(p, "agent").is_none_or(|s| s.is_empty()) {
                    return bad("agent_review needs an agent name".into());
                }
            }
            Primitive::RoleEscalation => {
                if param_str(p, "role").is_none_or(|s| s.is_empty()) {
                    return bad("role_escalation needs a role".into());
                }
            }
            Primitive::MemoryOverride => {}
            Primitive::MetaLogic => {
                let Some(when) = p.get("when") else {
                    return bad("meta_logic needs a 'when' trigger".into());
                };
                TriggerExpr::from_json(when)?;
                for key in ["then", "else"] {
                    if let Some(v) = p.get(key) {
                        if v.as_str().and_then(Decision::parse).is_none() {
                            return bad(format!("meta_logic '{key}' must be a decision"));
                        }
                    }
                }
                if !p.contains_key("then") {
                    return bad("meta_logic needs a 'then' decision".into());
                }
            }
            Primitive::Custom => {
                if param_str(p, "hook").is_none_or(|s| s.is_empty()) {
                    return bad("custom needs a registered hook name".into());
                }
            }
        }
        Ok(())
    }

    pub fn fires(&self, input: &TriggerInput<'_>) -> bool {
        self.trigger.evaluate(input)
    }
}

fn gate_value(params: &serde_json::Map<String, Value>, key: &str) -> Option<f64> {
    param_num(params, key).and_then(to_percent_scale)
}

/// Registry with copy-on-write snapshots; readers never block on edits.
#[derive(Debug, Default)]
pub struct MitigationRegistry {
    inner: RwLock<Arc<Vec<Mitigation>>>,
}

impl MitigationRegistry {
    pub fn new(items: Vec<Mitigation>) -> Result<Self> {
        let reg = MitigationRegistry::default();
        reg.replace_all(items)?;
        Ok(reg)
    }

    pub fn snapshot(&self) -> Arc<Vec<Mitigation>> {
        self.inner.read().expect("registry lock").clone()
    }

    pub fn get(&self, id: &str) -> Option<Mitigation> {
        self.snapshot().iter().find(|m| m.mitigation_id == id).cloned()
    }

    /// Inserts or replaces; a replaced entry keeps its registration slot.
    /// Returns true when the id was new.
    pub fn upsert(&self, m: Mitigation) -> Result<bool> {
        m.validate()?;
        let mut guard = self.inner.write().expect("registry lock");
        let mut next = (**guard).clone();
        let fresh = match next.iter_mut().find(|x| x.mitigation_id == m.mitigation_id) {
            Some(slot) => {
                *slot = m;
                false
            }
            None => {
                next.push(m);
                true
            }
        };
        *guard = Arc::new(next);
        Ok(fresh)
    }

    pub fn remove(&self, id: &str) -> Result<Mitigation> {
        let mut guard = self.inner.write().expect("registry lock");
        let mut next = (**guard).clone();
        let pos = next
            .iter()
            .position(|m| m.mitigation_id == id)
            .ok_or_else(|| AuraError::not_found("mitigation", id))?;
        let removed = next.remove(pos);
        *guard = Arc::new(next);
        Ok(removed)
    }

    pub fn replace_all(&self, items: Vec<Mitigation>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for m in &items {
            m.validate()?;
            if !seen.insert(m.mitigation_id.clone()) {
                return Err(AuraError::Duplicate { duplicate_of: m.mitigation_id.clone() });
            }
        }
        *self.inner.write().expect("registry lock") = Arc::new(items);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    Rule,
    Memory,
    ModelProposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMitigation {
    pub mitigation: Mitigation,
    pub source: SelectionSource,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Selection {
    pub selected: Vec<SelectedMitigation>,
    /// Low confidence or escalate band: a human must look at the case.
    pub hitl_escalation: bool,
    pub proposal_targets: Vec<PairKey>,
}

impl Selection {
    pub fn mitigations(&self) -> Vec<Mitigation> {
        self.selected.iter().map(|s| s.mitigation.clone()).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.mitigation.mitigation_id.clone()).collect()
    }

    pub fn rewrite_capable(&self) -> bool {
        self.selected.iter().any(|s| s.mitigation.rewrite_capable)
    }
}

pub struct SelectionInput<'a> {
    pub profile: &'a RiskProfile,
    pub action: &'a ActionRecord,
    pub policy: &'a ThresholdPolicy,
    pub registry: &'a [Mitigation],
    pub memory_hits: &'a [Mitigation],
    /// Pairs the model proposal should target.
    pub targets: &'a [PairKey],
    pub low_confidence: bool,
}

/// Smallest prefix of pairs, by decreasing contribution, that carries at
/// least `share` of gamma. At least one pair when gamma is positive.
pub fn pareto_targets(result: &GammaResult, share: f64) -> Vec<PairKey> {
    let mut pairs: Vec<_> = result
        .pair_contributions
        .iter()
        .filter(|p| p.contribution > 0.0)
        .collect();
    pairs.sort_by(|a, b| b.contribution.total_cmp(&a.contribution).then_with(|| a.key().cmp(&b.key())));
    let mut out = Vec::new();
    let mut acc = 0.0;
    for p in pairs {
        if !out.is_empty() && acc >= share * result.gamma {
            break;
        }
        acc += p.contribution;
        out.push(p.key());
    }
    out
}

/// Ordering: fired rule entries ranked by importance then registration
/// order, then fired memory-linked mitigations, then (only when nothing
/// fired outside the allow band) a model proposal.
pub fn select(
    input: &SelectionInput<'_>,
    propose: &mut dyn FnMut(&[PairKey]) -> Vec<Mitigation>,
) -> Selection {
    let trig = TriggerInput {
        profile: input.profile,
        action: Some(input.action),
        policy: input.policy,
    };
    let band = input.profile.decision;
    let mut out = Selection::default();
    let mut seen = BTreeSet::new();

    let mut rules: Vec<(usize, &Mitigation)> = input
        .registry
        .iter()
        .enumerate()
        .filter(|(_, m)| m.provenance == MitigationProvenance::Rule && m.fires(&trig))
        .collect();
    rules.sort_by(|(ia, a), (ib, b)| {
        let rank = |m: &Mitigation| m.importance.unwrap_or(u32::MAX);
        rank(a)
            .cmp(&rank(b))
            .then(ia.cmp(ib))
            .then_with(|| a.mitigation_id.cmp(&b.mitigation_id))
    });
    for (_, m) in rules {
        if seen.insert(m.mitigation_id.clone()) {
            out.selected.push(SelectedMitigation {
                mitigation: m.clone(),
                source: SelectionSource::Rule,
            });
        }
    }
    for m in input.memory_hits {
        if m.fires(&trig) && seen.insert(m.mitigation_id.clone()) {
            out.selected.push(SelectedMitigation {
                mitigation: m.clone(),
                source: SelectionSource::Memory,
            });
        }
    }
    if out.selected.is_empty() && band != Decision::Allow && !input.targets.is_empty() {
        out.proposal_targets = input.targets.to_vec();
        for mut m in propose(input.targets) {
            if m.validate().is_err() {
                continue;
            }
            m.provenance = MitigationProvenance::ModelProposed;
            if seen.insert(m.mitigation_id.clone()) {
                out.selected.push(SelectedMitigation {
                    mitigation: m,
                    source: SelectionSource::ModelProposed,
                });
            }
        }
    }
    out.hitl_escalation = input.low_confidence || band == Decision::Escalate;
    out
}

/// Verdict returned by a reviewing agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewVerdict {
    Approve,
    Deny,
    Comment(String),
}

pub trait ReviewAgent: Send + Sync {
    fn review(&self, action: &ActionRecord, profile: &RiskProfile) -> std::result::Result<ReviewVerdict, String>;
}

pub type HookFn =
    dyn Fn(&ActionRecord, &RiskProfile, &serde_json::Map<String, Value>) -> std::result::Result<Decision, String>
        + Send
        + Sync;

/// Named callables registered at the library boundary. Definitions coming
/// over the wire can only reference these by name.
#[derive(Clone, Default)]
pub struct HookRegistry {
    hooks: BTreeMap<String, Arc<HookFn>>,
    reviewers: BTreeMap<String, Arc<dyn ReviewAgent>>,
}

impl fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookRegistry")
            .field("hooks", &self.hooks.keys().collect::<Vec<_>>())
            .field("reviewers", &self.reviewers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl HookRegistry {
    pub fn register_hook(&mut self, name: &str, hook: Arc<HookFn>) {
        self.hooks.insert(name.to_string(), hook);
    }

    pub fn register_reviewer(&mut self, name: &str, agent: Arc<dyn ReviewAgent>) {
        self.reviewers.insert(name.to_string(), agent);
    }

    pub fn hook_names(&self) -> Vec<String> {
        self.hooks.keys().cloned().collect()
    }
}

/// Runtime context for primitives.
pub struct ExecContext<'a> {
    pub policy: &'a ThresholdPolicy,
    pub now: DateTime<Utc>,
    pub hooks: &'a HookRegistry,
    pub roles: &'a [String],
    pub preferences: &'a [PreferenceRecord],
    pub approvals_required: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveEffect {
    pub decision: Decision,
    pub note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_gate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    /// Opens a human review session without running uncertainty detection.
    #[serde(default)]
    pub open_hitl: bool,
}

impl PrimitiveEffect {
    fn new(decision: Decision, note: impl Into<String>) -> Self {
        PrimitiveEffect {
            decision,
            note: note.into(),
            pending_gate: None,
            payload: None,
            open_hitl: false,
        }
    }

    fn gate(mut self, gate: impl Into<String>) -> Self {
        self.pending_gate = Some(gate.into());
        self
    }
}

/// Applies a single primitive. Errors only for custom hook failures.
pub fn run_primitive(
    kind: Primitive,
    params: &serde_json::Map<String, Value>,
    action: &ActionRecord,
    profile: &RiskProfile,
    ctx: &ExecContext<'_>,
) -> Result<PrimitiveEffect> {
    Ok(match kind {
        Primitive::Grounding => {
            let snippet = param_str(params, "snippet").unwrap_or("").trim();
            if snippet.is_empty() {
                PrimitiveEffect::new(Decision::Allow, "no grounding snippet, nothing injected")
            } else {
                let mut e = PrimitiveEffect::new(Decision::Allow, "trusted context injected");
                e.payload = Some(serde_json::json!({ "grounding": snippet }));
                e
            }
        }
        Primitive::Guardrail => {
            let text = action.searchable_text();
            let hit = params
                .get("forbid")
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
                .filter_map(Value::as_str)
                .find(|pat| !pat.is_empty() && text.contains(&pat.to_lowercase()));
            if let Some(pat) = hit {
                PrimitiveEffect::new(Decision::Block, format!("forbidden pattern '{pat}'"))
            } else if params.get("require_confirmation").and_then(Value::as_bool) == Some(true) {
                PrimitiveEffect::new(Decision::Warn, "explicit confirmation required").gate("confirmation")
            } else {
                PrimitiveEffect::new(Decision::Allow, "no forbidden pattern")
            }
        }
        Primitive::ThresholdGate => {
            let block = gate_value(params, "block").unwrap_or(60.0);
            let warn = gate_value(params, "warn").unwrap_or(30.0);
            let g = profile.gamma_norm;
            if g >= block {
                PrimitiveEffect::new(Decision::Block, format!("gamma_norm {g} >= {block}"))
            } else if g >= warn {
                PrimitiveEffect::new(Decision::Warn, format!("gamma_norm {g} in [{warn}, {block})"))
            } else {
                PrimitiveEffect::new(Decision::Allow, format!("gamma_norm {g} < {warn}"))
            }
        }
        Primitive::AgentReview => {
            let name = param_str(params, "agent").unwrap_or("");
            match ctx.hooks.reviewers.get(name) {
                None => PrimitiveEffect::new(Decision::Escalate, format!("review agent '{name}' unreachable"))
                    .gate("human-review"),
                Some(agent) => match agent.review(action, profile) {
                    Ok(ReviewVerdict::Approve) => PrimitiveEffect::new(Decision::Allow, format!("approved by {name}")),
                    Ok(ReviewVerdict::Deny) => PrimitiveEffect::new(Decision::Block, format!("denied by {name}")),
                    Ok(ReviewVerdict::Comment(c)) => {
                        PrimitiveEffect::new(Decision::Warn, format!("{name}: {c}"))
                    }
                    Err(e) => PrimitiveEffect::new(Decision::Escalate, format!("review agent '{name}' failed: {e}"))
                        .gate("human-review"),
                },
            }
        }
        Primitive::RoleEscalation => {
            let role = param_str(params, "role").unwrap_or("");
            let note = if ctx.roles.iter().any(|r| r == role) {
                format!("routed to {role}")
            } else {
                format!("unknown role '{role}', routed to default reviewer")
            };
            let mut e = PrimitiveEffect::new(Decision::Escalate, note).gate(format!("role:{role}"));
            e.open_hitl = params.get("open_session").and_then(Value::as_bool) == Some(true);
            e
        }
        Primitive::MemoryOverride => {
            let record = find_preference(ctx.preferences, action);
            let adj = apply_preference_policy(action, record, profile.decision, ctx.now, ctx.approvals_required);
            match adj.forced {
                Some(d) => PrimitiveEffect::new(d, adj.reason),
                None => PrimitiveEffect::new(Decision::Allow, adj.reason),
            }
        }
        Primitive::MetaLogic => {
            let when = params
                .get("when")
                .and_then(|v| TriggerExpr::from_json(v).ok())
                .unwrap_or(TriggerExpr::Const(false));
            let input = TriggerInput {
                profile,
                action: Some(action),
                policy: ctx.policy,
            };
            let pick = |key: &str, default: Decision| {
                param_str(params, key).and_then(Decision::parse).unwrap_or(default)
            };
            if when.evaluate(&input) {
                PrimitiveEffect::new(pick("then", Decision::Escalate), format!("{when} holds"))
            } else {
                PrimitiveEffect::new(pick("else", Decision::Allow), format!("{when} does not hold"))
            }
        }
        Primitive::Custom => {
            let name = param_str(params, "hook").unwrap_or("");
            let hook = ctx.hooks.hooks.get(name).ok_or_else(|| AuraError::HookFailure {
                hook: name.to_string(),
                message: "hook is not registered".into(),
            })?;
            let d = hook(action, profile, params).map_err(|message| AuraError::HookFailure {
                hook: name.to_string(),
                message,
            })?;
            PrimitiveEffect::new(d, format!("hook '{name}' returned {d}"))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedStep {
    pub mitigation_id: String,
    pub primitive: Primitive,
    pub decision: Decision,
    pub note: String,
    pub steps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_gate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub final_decision: Decision,
    pub steps: Vec<ExecutedStep>,
    pub pending_gates: Vec<String>,
    pub halted: bool,
    #[serde(default)]
    pub open_hitl: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Runs the chain in order. Block and escalate stop it; a custom hook
/// failure stops it with escalate.
pub fn execute(
    mitigations: &[Mitigation],
    action: &ActionRecord,
    profile: &RiskProfile,
    ctx: &ExecContext<'_>,
) -> ExecutionReport {
    let mut report = ExecutionReport {
        final_decision: profile.decision,
        steps: Vec::new(),
        pending_gates: Vec::new(),
        halted: false,
        open_hitl: false,
        warnings: Vec::new(),
    };
    let mut rewrite = false;
    for m in mitigations {
        let effect = match run_primitive(m.primitive, &m.params, action, profile, ctx) {
            Ok(e) => e,
            Err(err) => {
                tracing::warn!(mitigation = %m.mitigation_id, error = %err, "mitigation hook failed");
                report.warnings.push(err.to_string());
                report.steps.push(ExecutedStep {
                    mitigation_id: m.mitigation_id.clone(),
                    primitive: m.primitive,
                    decision: Decision::Escalate,
                    note: err.to_string(),
                    steps: m.steps.clone(),
                    pending_gate: Some("human-review".into()),
                    payload: None,
                    at: ctx.now,
                });
                report.pending_gates.push("human-review".into());
                report.final_decision = Decision::Escalate;
                report.halted = true;
                return report;
            }
        };
        rewrite |= m.rewrite_capable;
        if let Some(g) = &effect.pending_gate {
            report.pending_gates.push(g.clone());
        }
        report.open_hitl |= effect.open_hitl;
        report.final_decision = report.final_decision.max(effect.decision);
        let terminal = effect.decision.is_terminal();
        report.steps.push(ExecutedStep {
            mitigation_id: m.mitigation_id.clone(),
            primitive: m.primitive,
            decision: effect.decision,
            note: effect.note,
            steps: m.steps.clone(),
            pending_gate: effect.pending_gate,
            payload: effect.payload,
            at: ctx.now,
        });
        if terminal {
            report.halted = true;
            break;
        }
    }
    if report.final_decision == Decision::Warn && rewrite {
        report.final_decision = Decision::Rewrite;
    }
    report
}

/// Resolves ids against the registry; unknown ids are skipped with a warning.
pub fn resolve_ids(ids: &[String], registry: &[Mitigation]) -> (Vec<Mitigation>, Vec<String>) {
    let mut found = Vec::new();
    let mut warnings = Vec::new();
    for id in ids {
        match registry.iter().find(|m| &m.mitigation_id == id) {
            Some(m) => found.push(m.clone()),
            None => warnings.push(format!("mitigation '{id}' is no longer registered, skipped")),
        }
    }
    (found, warnings)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PreferencePolicy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub always_explain_first: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmation_channel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_submit_personal_data: Option<bool>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// Editable per-user preferences for one intent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub user_id: String,
    pub intent: String,
    #[serde(default)]
    pub policy: PreferencePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
    /// Consecutive approvals the user has given for this intent.
    #[serde(default)]
    pub approvals: u32,
}

impl PreferenceRecord {
    pub fn expires_at(&self) -> Option<DateTime<Utc>> {
        let ttl = parse_ttl(self.ttl.as_deref()?).ok()?;
        Some(self.created_at? + ttl)
    }

    pub fn is_expired(&self, now: DateTime<Utc>) -> bool {
        self.expires_at().is_some_and(|t| t <= now)
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_id.is_empty() || self.intent.is_empty() {
            return Err(AuraError::InvalidInput("preference needs user_id and intent".into()));
        }
        if let Some(t) = &self.ttl {
            parse_ttl(t)?;
        }
        Ok(())
    }
}

/// Durations such as `180d`, `12h`, `30m`, `45s`, `2w`.
pub fn parse_ttl(s: &str) -> Result<Duration> {
    let s = s.trim();
    let bad = || AuraError::InvalidInput(format!("ttl '{s}' is not <number><s|m|h|d|w>"));
    let unit = s.chars().last().ok_or_else(bad)?;
    let n: i64 = s[..s.len() - unit.len_utf8()].parse().map_err(|_| bad())?;
    if n < 0 {
        return Err(bad());
    }
    match unit {
        's' => Ok(Duration::seconds(n)),
        'm' => Ok(Duration::minutes(n)),
        'h' => Ok(Duration::hours(n)),
        'd' => Ok(Duration::days(n)),
        'w' => Ok(Duration::weeks(n)),
        _ => Err(bad()),
    }
}

const SUBMISSION_VERBS: &[&str] = &["submit", "send", "upload", "post", "share", "fill", "transfer"];

/// Actions that hand personal data to a third party.
pub fn is_data_submission(action: &ActionRecord) -> bool {
    let verb = action.action.to_lowercase();
    let by_verb = verb
        .split(|c: char| !c.is_ascii_alphanumeric())
        .any(|w| SUBMISSION_VERBS.contains(&w));
    let flagged = matches!(action.fact("personal_data"), Some(crate::model::FactValue::Bool(true)));
    by_verb || flagged
}

/// The user is the `user_id` fact when present, else the actor.
pub fn find_preference<'a>(records: &'a [PreferenceRecord], action: &ActionRecord) -> Option<&'a PreferenceRecord> {
    let user = action
        .fact("user_id")
        .map(|v| v.render())
        .unwrap_or_else(|| action.actor.clone());
    records
        .iter()
        .find(|r| r.user_id == user && r.intent == action.intent)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PreferenceAdjustment {
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced: Option<Decision>,
    pub waive_human_gate: bool,
    pub expired: bool,
    pub reason: String,
}

pub fn apply_preference_policy(
    action: &ActionRecord,
    record: Option<&PreferenceRecord>,
    band_decision: Decision,
    now: DateTime<Utc>,
    approvals_required: u32,
) -> PreferenceAdjustment {
    let Some(record) = record else {
        return PreferenceAdjustment {
            reason: "no matching preference".into(),
            ..Default::default()
        };
    };
    if record.is_expired(now) {
        tracing::info!(user = %record.user_id, intent = %record.intent, "preference expired, ignored");
        return PreferenceAdjustment {
            expired: true,
            reason: format!("preference for {}/{} expired", record.user_id, record.intent),
            ..Default::default()
        };
    }
    let mut adj = PreferenceAdjustment {
        applied: true,
        reason: format!("preference for {}/{}", record.user_id, record.intent),
        ..Default::default()
    };
    if record.policy.auto_submit_personal_data == Some(false) && is_data_submission(action) {
        adj.forced = Some(Decision::Escalate);
        adj.reason = "user does not allow autonomous submission of personal data".into();
        return adj;
    }
    if band_decision == Decision::Allow && approvals_required > 0 && record.approvals >= approvals_required {
        adj.waive_human_gate = true;
        adj.reason = format!("{} prior approvals, human gate waived", record.approvals);
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::profile_at;
    use chrono::TimeZone;
    use serde_json::json;

    fn ctx<'a>(policy: &'a ThresholdPolicy, hooks: &'a HookRegistry, prefs: &'a [PreferenceRecord]) -> ExecContext<'a> {
        ExecContext {
            policy,
            now: Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap(),
            hooks,
            roles: &[],
            preferences: prefs,
            approvals_required: 3,
        }
    }

    fn gate() -> Mitigation {
        Mitigation::new("gate", Primitive::ThresholdGate)
            .with_param("block", 60)
            .with_param("warn", 30)
    }

    fn action() -> ActionRecord {
        ActionRecord::new("submit_form", "account_signup", "web_agent")
    }

    #[test]
    fn threshold_gate_bands() {
        let policy = ThresholdPolicy::default();
        let hooks = HookRegistry::default();
        let c = ctx(&policy, &hooks, &[]);
        let g = gate();
        let run = |x: f64| run_primitive(g.primitive, &g.params, &action(), &profile_at(x), &c).unwrap().decision;
        assert_eq!(run(72.0), Decision::Block);
        assert_eq!(run(45.0), Decision::Warn);
        assert_eq!(run(20.0), Decision::Allow);
        assert_eq!(run(60.0), Decision::Block);
        assert_eq!(run(30.0), Decision::Warn);
        let frac = Mitigation::new("g2", Primitive::ThresholdGate)
            .with_param("block", 0.6)
            .with_param("warn", 0.3);
        frac.validate().unwrap();
        let d = run_primitive(frac.primitive, &frac.params, &action(), &profile_at(72.0), &c).unwrap();
        assert_eq!(d.decision, Decision::Block);
    }

    #[test]
    fn edited_gate_threshold_changes_band() {
        let policy = ThresholdPolicy::default();
        let hooks = HookRegistry::default();
        let c = ctx(&policy, &hooks, &[]);
        let g = gate().with_param("block", 70);
        let d = run_primitive(g.primitive, &g.params, &action(), &profile_at(65.0), &c).unwrap();
        assert_eq!(d.decision, Decision::Warn);
    }

    #[test]
    fn guardrail_blocks_forbidden_patterns() {
        let policy = ThresholdPolicy::default();
        let hooks = HookRegistry::default();
        let c = ctx(&policy, &hooks, &[]);
        let m = Mitigation::new("no-upload", Primitive::Guardrail).with_param("forbid", json!(["upload"]));
        let up = ActionRecord::new("upload_file", "backup", "agent");
        assert_eq!(
            run_primitive(m.primitive, &m.params, &up, &profile_at(10.0), &c).unwrap().decision,
            Decision::Block
        );
        assert_eq!(
            run_primitive(m.primitive, &m.params, &action(), &profile_at(10.0), &c).unwrap().decision,
            Decision::Allow
        );
    }

    #[test]
    fn meta_logic_branches() {
        let policy = ThresholdPolicy::default();
        let hooks = HookRegistry::default();
        let c = ctx(&policy, &hooks, &[]);
        let m = Mitigation::new("meta", Primitive::MetaLogic)
            .with_param(
                "when",
                json!({"any": [
                    {"field": "dimension_level.legal-rights-alignment", "op": "eq", "value": "Medium"},
                    {"field": "level", "op": "eq", "value": "High"}
                ]}),
            )
            .with_param("then", "escalate");
        m.validate().unwrap();
        let mut p = profile_at(20.0);
        p.breakdown.radar.insert("legal-rights-alignment".into(), 0.4);
        assert_eq!(run_primitive(m.primitive, &m.params, &action(), &p, &c).unwrap().decision, Decision::Escalate);
        p.breakdown.radar.insert("legal-rights-alignment".into(), 0.1);
        assert_eq!(run_primitive(m.primitive, &m.params, &action(), &p, &c).unwrap().decision, Decision::Allow);
    }

    #[test]
    fn grounding_without_snippet_is_a_no_op() {
        let policy = ThresholdPolicy::default();
        let hooks = HookRegistry::default();
        let c = ctx(&policy, &hooks, &[]);
        let m = Mitigation::new("ground", Primitive::Grounding);
        let e = run_primitive(m.primitive, &m.params, &action(), &profile_at(40.0), &c).unwrap();
        assert_eq!(e.decision, Decision::Allow);
        assert!(e.payload.is_none());
    }

    #[test]
    fn unreachable_reviewer_escalates() {
        let policy = ThresholdPolicy::default();
        let hooks = HookRegistry::default();
        let c = ctx(&policy, &hooks, &[]);
        let m = Mitigation::new("review", Primitive::AgentReview).with_param("agent", "ghost");
        let e = run_primitive(m.primitive, &m.params, &action(), &profile_at(40.0), &c).unwrap();
        assert_eq!(e.decision, Decision::Escalate);
    }

    #[test]
    fn chain_stops_at_terminal_and_hook_failure_escalates() {
        let policy = ThresholdPolicy::default();
        let mut hooks = HookRegistry::default();
        hooks.register_hook("boom", Arc::new(|_, _, _| Err("exploded".to_string())));
        let c = ctx(&policy, &hooks, &[]);
        let block = Mitigation::new("no-submit", Primitive::Guardrail).with_param("forbid", json!(["submit"]));
        let after = Mitigation::new("ground", Primitive::Grounding).with_param("snippet", "x");
        let r = execute(&[block, after.clone()], &action(), &profile_at(10.0), &c);
        assert_eq!(r.final_decision, Decision::Block);
        assert_eq!(r.steps.len(), 1);
        assert!(r.halted);

        let hook = Mitigation::new("custom", Primitive::Custom).with_param("hook", "boom");
        let r = execute(&[hook, after], &action(), &profile_at(10.0), &c);
        assert_eq!(r.final_decision, Decision::Escalate);
        assert_eq!(r.steps.len(), 1);
    }

    #[test]
    fn rewrite_capable_upgrades_warn() {
        let policy = ThresholdPolicy::default();
        let hooks = HookRegistry::default();
        let c = ctx(&policy, &hooks, &[]);
        let mut m = Mitigation::new("confirm", Primitive::Guardrail).with_param("require_confirmation", true);
        m.rewrite_capable = true;
        let r = execute(&[m], &action(), &profile_at(58.0), &c);
        assert_eq!(r.final_decision, Decision::Rewrite);
        assert_eq!(r.pending_gates, vec!["confirmation".to_string()]);
    }

    #[test]
    fn rule_block_outranks_memory_warn() {
        let policy = ThresholdPolicy::default();
        let p = profile_at(45.0);
        let mut warn = Mitigation::new("mem-warn", Primitive::Guardrail).with_param("require_confirmation", true);
        warn.provenance = MitigationProvenance::Memory;
        let mut block = Mitigation::new("rule-block", Primitive::Guardrail).with_param("forbid", json!(["submit"]));
        block.importance = Some(1);
        let a = action();
        let input = SelectionInput {
            profile: &p,
            action: &a,
            policy: &policy,
            registry: std::slice::from_ref(&block),
            memory_hits: std::slice::from_ref(&warn),
            targets: &[],
            low_confidence: false,
        };
        let s = select(&input, &mut |_| vec![]);
        assert_eq!(s.ids(), vec!["rule-block".to_string(), "mem-warn".to_string()]);
    }

    #[test]
    fn allow_band_selects_nothing_and_never_proposes() {
        let policy = ThresholdPolicy::default();
        let p = profile_at(10.0);
        let a = action();
        let targets = [PairKey::new("c", "d")];
        let input = SelectionInput {
            profile: &p,
            action: &a,
            policy: &policy,
            registry: &[gate().with_trigger(TriggerExpr::cmp("level", crate::trigger::CmpOp::Eq, "High"))],
            memory_hits: &[],
            targets: &targets,
            low_confidence: false,
        };
        let mut called = false;
        let s = select(&input, &mut |_| {
            called = true;
            vec![]
        });
        assert!(s.selected.is_empty());
        assert!(!called);
        assert!(!s.hitl_escalation);
    }

    #[test]
    fn importance_then_registration_order() {
        let policy = ThresholdPolicy::default();
        let p = profile_at(45.0);
        let a = action();
        let mut x = Mitigation::new("x", Primitive::Grounding);
        x.importance = Some(5);
        let y = Mitigation::new("y", Primitive::Grounding);
        let mut z = Mitigation::new("z", Primitive::Grounding);
        z.importance = Some(1);
        let reg = vec![y, x, z];
        let input = SelectionInput {
            profile: &p,
            action: &a,
            policy: &policy,
            registry: &reg,
            memory_hits: &[],
            targets: &[],
            low_confidence: true,
        };
        let s = select(&input, &mut |_| vec![]);
        assert_eq!(s.ids(), vec!["z", "x", "y"]);
        assert!(s.hitl_escalation);
    }

    #[test]
    fn ttl_parsing() {
        assert_eq!(parse_ttl("180d").unwrap(), Duration::days(180));
        assert_eq!(parse_ttl("2w").unwrap(), Duration::days(14));
        assert!(parse_ttl("soon").is_err());
        assert!(parse_ttl("").is_err());
    }

    fn preference(created: DateTime<Utc>) -> PreferenceRecord {
        serde_json::from_value(json!({
            "user_id": "web_agent", "intent": "account_signup",
            "policy": {"always_explain_first": true, "confirmation_channel": "push_notification",
                       "auto_submit_personal_data": false},
            "ttl": "180d", "created_at": created
        }))
        .unwrap()
    }

    #[test]
    fn preference_forces_escalate_until_expiry() {
        let now = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
        let fresh = preference(now - Duration::days(10));
        let adj = apply_preference_policy(&action(), Some(&fresh), Decision::Allow, now, 3);
        assert_eq!(adj.forced, Some(Decision::Escalate));
        let stale = preference(now - Duration::days(181));
        let adj = apply_preference_policy(&action(), Some(&stale), Decision::Allow, now, 3);
        assert!(adj.expired);
        assert_eq!(adj.forced, None);
        assert_eq!(apply_preference_policy(&action(), None, Decision::Allow, now, 3), PreferenceAdjustment {
            reason: "no matching preference".into(),
            ..Default::default()
        });
    }

    #[test]
    fn approvals_waive_gate_in_allow_band_only() {
        let now = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
        let mut p = preference(now);
        p.policy.auto_submit_personal_data = Some(true);
        p.approvals = 4;
        assert!(apply_preference_policy(&action(), Some(&p), Decision::Allow, now, 3).waive_human_gate);
        assert!(!apply_preference_policy(&action(), Some(&p), Decision::Warn, now, 3).waive_human_gate);
    }

    #[test]
    fn preference_lookup_by_user_and_intent() {
        let now = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
        let recs = vec![preference(now)];
        assert!(find_preference(&recs, &action()).is_some());
        let other = ActionRecord::new("submit_form", "newsletter", "web_agent");
        assert!(find_preference(&recs, &other).is_none());
        let by_user = ActionRecord::new("submit_form", "account_signup", "bot").with_fact("user_id", "web_agent");
        assert!(find_preference(&recs, &by_user).is_some());
    }

    #[test]
    fn invalid_definitions_are_rejected() {
        assert!(Mitigation::new("g", Primitive::ThresholdGate).validate().is_err());
        assert!(Mitigation::new("g", Primitive::ThresholdGate)
            .with_param("block", 30)
            .with_param("warn", 60)
            .validate()
            .is_err());
        assert!(Mitigation::new("c", Primitive::Custom).validate().is_err());
        assert!(Mitigation::new("m", Primitive::MetaLogic).with_param("when", true).validate().is_err());
        let reg = MitigationRegistry::default();
        reg.upsert(gate()).unwrap();
        assert!(matches!(
            reg.replace_all(vec![gate(), gate()]),
            Err(AuraError::Duplicate { .. })
        ));
    }

    #[test]
    fn pareto_prefix() {
        use crate::scoring::PairContribution;
        let pc = |c: &str, v: f64| PairContribution {
            context_id: c.into(),
            dimension_id: "d".into(),
            weight: 1.0,
            score: v,
            contribution: v,
        };
        let r = GammaResult {
            gamma: 1.0,
            u_total: 4.0,
            gamma_norm: 25.0,
            mean_weighted_score: 0.25,
            variance: 0.0,
            concentration: 0.0,
            pair_contributions: vec![pc("a", 0.5), pc("b", 0.3), pc("c", 0.15), pc("e", 0.05)],
            dimension_risk: BTreeMap::new(),
            degenerate: false,
        };
        let t = pareto_targets(&r, 0.8);
        assert_eq!(t, vec![PairKey::new("a", "d"), PairKey::new("b", "d")]);
    }
}
