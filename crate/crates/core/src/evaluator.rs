//! Model-assisted steps behind a JSON adapter boundary.
//!
//! Adapters speak [`EvaluatorRequest`]/[`EvaluatorResponse`] only. The
//! [`Evaluator`] facade builds requests, meters calls, enforces latency and
//! call budgets, and validates every response against its kind's schema
//! before handing typed values to the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{AuraError, Result};
use crate::hitl::{Component, UncertaintyFlag};
use crate::mitigation::{Mitigation, MitigationProvenance, Primitive};
use crate::model::{fnv1a, slug, ActionRecord, ContextItem, Derivation, Dimension, FactValue, PairKey, Tier};
use crate::registry::normalize_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ParseContext,
    ProposeDimensions,
    ScorePair,
    ProposeMitigations,
    GenerateQuestions,
}

impl RequestKind {
    pub const ALL: [RequestKind; 5] = [
        RequestKind::ParseContext,
        RequestKind::ProposeDimensions,
        RequestKind::ScorePair,
        RequestKind::ProposeMitigations,
        RequestKind::GenerateQuestions,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RequestKind::ParseContext => "parse_context",
            RequestKind::ProposeDimensions => "propose_dimensions",
            RequestKind::ScorePair => "score_pair",
            RequestKind::ProposeMitigations => "propose_mitigations",
            RequestKind::GenerateQuestions => "generate_questions",
        }
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

/// Limits applied to every call of one assessment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_calls: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_ms: Option<u64>,
    /// Allows adapters to spend more effort per call.
    #[serde(default)]
    pub deep: bool,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_calls: Some(1_000),
            max_latency_ms: Some(30_000),
            deep: false,
        }
    }
}

impl Budget {
    pub fn deep() -> Self {
        Budget {
            max_calls: Some(5_000),
            max_latency_ms: Some(120_000),
            deep: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorRequest {
    pub kind: RequestKind,
    pub payload: Value,
    pub budget: Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorResponse {
    pub kind: RequestKind,
    pub payload: Value,
    pub confidence: f64,
    #[serde(default)]
    pub rationale: String,
}

/// A model provider or stub. Must tolerate concurrent calls.
pub trait EvaluatorAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn call(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub parse_context: u64,
    pub propose_dimensions: u64,
    pub score_pair: u64,
    pub propose_mitigations: u64,
    pub generate_questions: u64,
    pub total: u64,
}

/// Per-run call counters shared by concurrent requests of that run.
#[derive(Debug, Default)]
pub struct CallMeter {
    counts: [AtomicU64; 5],
    total: AtomicU64,
    limit: Option<u64>,
}

impl CallMeter {
    pub fn new(budget: &Budget) -> Self {
        CallMeter {
            limit: budget.max_calls,
            ..Default::default()
        }
    }

    pub fn unlimited() -> Self {
        CallMeter::default()
    }

    fn charge(&self, kind: RequestKind) -> Result<()> {
        let n = self.total.fetch_add(1, Ordering::SeqCst) + 1;
        if self.limit.is_some_and(|max| n > max) {
            self.total.fetch_sub(1, Ordering::SeqCst);
            return Err(AuraError::AdapterFailure(format!(
                "call budget of {} exhausted",
                self.limit.unwrap_or_default()
            )));
        }
        self.counts[kind.index()].fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    pub fn calls(&self, kind: RequestKind) -> u64 {
        self.counts[kind.index()].load(Ordering::SeqCst)
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            parse_context: self.calls(RequestKind::ParseContext),
            propose_dimensions: self.calls(RequestKind::ProposeDimensions),
            score_pair: self.calls(RequestKind::ScorePair),
            propose_mitigations: self.calls(RequestKind::ProposeMitigations),
            generate_questions: self.calls(RequestKind::GenerateQuestions),
            total: self.total.load(Ordering::SeqCst),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub score: f64,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposed<T> {
    pub items: T,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub rationale: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextsPayload {
    items: Vec<ContextItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DimensionsPayload {
    dimensions: Vec<Dimension>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScorePayload {
    score: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MitigationsPayload {
    mitigations: Vec<Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionsPayload {
    questions: Vec<String>,
}

fn reject(kind: RequestKind, msg: impl std::fmt::Display) -> AuraError {
    AuraError::AdapterFailure(format!("{} response rejected: {msg}", kind.as_str()))
}

fn decode<T: serde::de::DeserializeOwned>(kind: RequestKind, payload: &Value) -> Result<T> {
    serde_json::from_value(payload.clone()).map_err(|e| reject(kind, e))
}

/// Typed, metered front of an adapter.
#[derive(Clone)]
pub struct Evaluator {
    adapter: Arc<dyn EvaluatorAdapter>,
    budget: Budget,
}

impl std::fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Evaluator")
            .field("adapter", &self.adapter.name())
            .field("budget", &self.budget)
            .finish()
    }
}

impl Evaluator {
    pub fn new(adapter: Arc<dyn EvaluatorAdapter>, budget: Budget) -> Self {
        Evaluator { adapter, budget }
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn adapter_name(&self) -> &str {
        self.adapter.name()
    }

    pub fn with_budget(&self, budget: Budget) -> Self {
        Evaluator {
            adapter: self.adapter.clone(),
            budget,
        }
    }

    fn call(&self, meter: &CallMeter, kind: RequestKind, payload: Value) -> Result<EvaluatorResponse> {
        meter.charge(kind)?;
        let request = EvaluatorRequest {
            kind,
            payload,
            budget: self.budget,
        };
        let started = Instant::now();
        let response = self.adapter.call(&request)?;
        let elapsed = started.elapsed();
        if let Some(max) = self.budget.max_latency_ms {
            if elapsed > Duration::from_millis(max) {
                return Err(AuraError::AdapterTimeout(format!(
                    "{} took {} ms, budget {max} ms",
                    kind.as_str(),
                    elapsed.as_millis()
                )));
            }
        }
        if response.kind != kind {
            return Err(reject(kind, format!("answered as {}", response.kind.as_str())));
        }
        if !(0.0..=1.0).contains(&response.confidence) {
            return Err(reject(kind, format!("confidence {} outside [0,1]", response.confidence)));
        }
        Ok(response)
    }

    pub fn parse_context(&self, meter: &CallMeter, action: &ActionRecord) -> Result<Proposed<Vec<ContextItem>>> {
        let kind = RequestKind::ParseContext;
        let r = self.call(meter, kind, json!({ "action": action }))?;
        let items = decode::<ContextsPayload>(kind, &r.payload)?.items;
        let mut ids = BTreeSet::new();
        for c in &items {
            if c.context_id.trim().is_empty() || c.label.trim().is_empty() {
                return Err(reject(kind, "context item with empty id or label"));
            }
            if !ids.insert(c.context_id.as_str()) {
                return Err(reject(kind, format!("context '{}' listed twice", c.context_id)));
            }
        }
        for key in action.context_facts.keys().filter(|k| k.as_str() != TAG_KEY) {
            if !ids.contains(key.as_str()) {
                return Err(reject(kind, format!("declared fact '{key}' has no context item")));
            }
        }
        Ok(Proposed {
            items,
            confidence: r.confidence,
            rationale: r.rationale,
        })
    }

    pub fn propose_dimensions(
        &self,
        meter: &CallMeter,
        action: &ActionRecord,
        contexts: &[ContextItem],
    ) -> Result<Proposed<Vec<Dimension>>> {
        let kind = RequestKind::ProposeDimensions;
        let r = self.call(meter, kind, json!({ "action": action, "contexts": contexts }))?;
        let dims = decode::<DimensionsPayload>(kind, &r.payload)?.dimensions;
        for d in &dims {
            if d.tier == Tier::Core {
                return Err(reject(kind, format!("'{}' proposed in the core tier", d.dimension_id)));
            }
            if d.dimension_id.trim().is_empty() {
                return Err(reject(kind, "dimension with empty id"));
            }
        }
        Ok(Proposed {
            items: dims,
            confidence: r.confidence,
            rationale: r.rationale,
        })
    }

    pub fn score_pair(
        &self,
        meter: &CallMeter,
        action: &ActionRecord,
        context: &ContextItem,
        dimension: &Dimension,
    ) -> Result<ScoreOutcome> {
        let kind = RequestKind::ScorePair;
        let r = self.call(
            meter,
            kind,
            json!({ "action": action, "context": context, "dimension": dimension }),
        )?;
        let score = decode::<ScorePayload>(kind, &r.payload)?.score;
        if !(0.0..=1.0).contains(&score) {
            return Err(reject(kind, format!("score {score} outside [0,1]")));
        }
        Ok(ScoreOutcome {
            score,
            confidence: r.confidence,
            rationale: r.rationale,
        })
    }

    pub fn propose_mitigations(
        &self,
        meter: &CallMeter,
        action: &ActionRecord,
        targets: &[PairKey],
    ) -> Result<Proposed<Vec<Mitigation>>> {
        let kind = RequestKind::ProposeMitigations;
        let r = self.call(meter, kind, json!({ "action": action, "targets": targets }))?;
        let raw = decode::<MitigationsPayload>(kind, &r.payload)?.mitigations;
        let mut items = Vec::with_capacity(raw.len());
        for v in raw {
            let mut m = Mitigation::from_json(&v).map_err(|e| reject(kind, e))?;
            m.provenance = MitigationProvenance::ModelProposed;
            items.push(m);
        }
        Ok(Proposed {
            items,
            confidence: r.confidence,
            rationale: r.rationale,
        })
    }

    /// One question per flag, in flag order.
    pub fn generate_questions(&self, meter: &CallMeter, flags: &[UncertaintyFlag]) -> Result<Vec<String>> {
        if flags.is_empty() {
            return Err(AuraError::Precondition("no flagged components to ask about".into()));
        }
        let kind = RequestKind::GenerateQuestions;
        let r = self.call(meter, kind, json!({ "flags": flags }))?;
        let qs = decode::<QuestionsPayload>(kind, &r.payload)?.questions;
        if qs.len() != flags.len() {
            return Err(reject(kind, format!("{} questions for {} flags", qs.len(), flags.len())));
        }
        if qs.iter().any(|q| q.trim().is_empty()) {
            return Err(reject(kind, "empty question text"));
        }
        Ok(qs)
    }
}

/// Fact key holding the free-form context tags of an action.
pub const TAG_KEY: &str = "context";

const CONTEXT_ALIASES: &[(&str, &str)] = &[
    ("untrusted_domain", "site_trust"),
    ("trusted_domain", "site_trust"),
    ("unknown_domain", "site_trust"),
    ("verified_domain", "site_trust"),
    ("morning", "time_of_day"),
    ("afternoon", "time_of_day"),
    ("evening", "time_of_day"),
    ("night", "time_of_day"),
    ("business_hours", "time_of_day"),
    ("after_hours", "time_of_day"),
    ("weekday", "day_of_week"),
    ("weekend", "day_of_week"),
    ("mobile", "device"),
    ("desktop", "device"),
];

pub fn default_context_aliases() -> BTreeMap<String, String> {
    CONTEXT_ALIASES
        .iter()
        .map(|(t, c)| (t.to_string(), c.to_string()))
        .collect()
}

fn tag_id(tag: &str) -> String {
    slug(tag).replace('-', "_")
}

/// Declared contexts: one item per fact key (tags mapped through the alias
/// table), the data sensitivity, and the intent.
pub fn declared_contexts(action: &ActionRecord, aliases: &BTreeMap<String, String>) -> Vec<ContextItem> {
    let mut out: Vec<ContextItem> = Vec::new();
    let push = |out: &mut Vec<ContextItem>, base: String, label: String| {
        let mut id = base.clone();
        let mut n = 2;
        while out.iter().any(|c| c.context_id == id) {
            id = format!("{base}_{n}");
            n += 1;
        }
        out.push(ContextItem::new(&id, &label, Derivation::Declared));
    };
    if let Some(tags) = action.fact(TAG_KEY) {
        let tags = match tags {
            FactValue::List(items) => items.iter().map(FactValue::render).collect(),
            other => vec![other.render()],
        };
        for t in tags {
            let key = tag_id(&t);
            let id = aliases.get(&key).cloned().unwrap_or(key);
            push(&mut out, id, t);
        }
    }
    for (k, v) in &action.context_facts {
        if k != TAG_KEY {
            push(&mut out, k.clone(), v.render());
        }
    }
    if let Some(s) = action.data_sensitivity {
        if !out.iter().any(|c| c.context_id == "data_sensitivity") {
            push(&mut out, "data_sensitivity".into(), s.as_str().into());
        }
    }
    if !out.iter().any(|c| c.context_id == "intent") {
        let label = if action.intent.is_empty() { "unspecified" } else { &action.intent };
        push(&mut out, "intent".into(), label.into());
    }
    out
}

/// One scoring fixture. `context` and `dimension` accept `*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub context: String,
    pub dimension: String,
    pub score: f64,
}

impl FixtureRow {
    /// Match strength, or `None` when the row does not apply.
    fn specificity(&self, action: &ActionRecord, context: &ContextItem, dimension: &Dimension) -> Option<u8> {
        let mut s = 0;
        if let Some(id) = &self.action_id {
            if id != &action.action_id {
                return None;
            }
            s += 4;
        } else if let Some(p) = &self.pattern {
            if p != "*" {
                if !glob(p, &action.action) {
                    return None;
                }
                s += 2;
            }
        }
        if self.context != "*" {
            if self.context != context.context_id && self.context != context.label {
                return None;
            }
            s += 2;
        }
        if self.dimension != "*" {
            if self.dimension != dimension.dimension_id && normalize_label(&self.dimension) != normalize_label(&dimension.label) {
                return None;
            }
            s += 1;
        }
        Some(s)
    }
}

/// `*` prefix/suffix wildcards only.
fn glob(pattern: &str, s: &str) -> bool {
    match (pattern.strip_prefix('*'), pattern.strip_suffix('*')) {
        (Some(rest), _) if rest.ends_with('*') => s.contains(rest.trim_end_matches('*')),
        (Some(rest), _) => s.ends_with(rest),
        (None, Some(rest)) => s.starts_with(rest),
        (None, None) => s == pattern,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordRule {
    pub keyword: String,
    pub dimensions: Vec<Dimension>,
}

fn kw(keyword: &str, dims: &[(&str, &str, Tier)]) -> KeywordRule {
    KeywordRule {
        keyword: keyword.into(),
        dimensions: dims.iter().map(|(id, label, t)| Dimension::new(id, label, *t)).collect(),
    }
}

pub fn default_keyword_rules() -> Vec<KeywordRule> {
    let signup = [
        ("consent", "Consent", Tier::Field),
        ("reversibility", "Reversibility", Tier::Field),
        ("cascading-impact", "Cascading Impact", Tier::Action),
        ("privacy", "Privacy", Tier::Field),
    ];
    let money = [
        ("financial-loss", "Financial Loss", Tier::Field),
        ("reversibility", "Reversibility", Tier::Field),
    ];
    let destructive = [
        ("reversibility", "Reversibility", Tier::Field),
        ("cascading-impact", "Cascading Impact", Tier::Action),
    ];
    let outbound = [
        ("consent", "Consent", Tier::Field),
        ("privacy", "Privacy", Tier::Field),
    ];
    let mut out = Vec::new();
    for k in ["signup", "register", "registration", "account"] {
        out.push(kw(k, &signup));
    }
    for k in ["payment", "purchase", "checkout", "pay", "refund"] {
        out.push(kw(k, &money));
    }
    for k in ["delete", "remove", "wipe", "drop"] {
        out.push(kw(k, &destructive));
    }
    for k in ["email", "message", "publish", "share"] {
        out.push(kw(k, &outbound));
    }
    out
}

/// Fixture tables of the stub. A bare JSON array is read as `rows`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureTable {
    #[serde(default)]
    pub rows: Vec<FixtureRow>,
    #[serde(default = "default_keyword_rules")]
    pub keywords: Vec<KeywordRule>,
    #[serde(default = "default_context_aliases")]
    pub context_aliases: BTreeMap<String, String>,
}

impl Default for FixtureTable {
    fn default() -> Self {
        FixtureTable {
            rows: Vec::new(),
            keywords: default_keyword_rules(),
            context_aliases: default_context_aliases(),
        }
    }
}

impl FixtureTable {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let table = if value.is_array() {
            FixtureTable {
                rows: serde_json::from_value(value)?,
                ..Default::default()
            }
        } else {
            serde_json::from_value(value)?
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.action_id.is_none() && r.pattern.is_none() {
                v.push(crate::model::Violation::new(
                    format!("rows[{i}]"),
                    "action_id or pattern",
                    "row names neither an action_id nor a pattern",
                ));
            }
            if !(0.0..=1.0).contains(&r.score) {
                v.push(crate::model::Violation::new(
                    format!("rows[{i}].score"),
                    "score in [0,1]",
                    format!("score {} outside [0,1]", r.score),
                ));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(AuraError::Validation(v))
        }
    }
}

/// Deterministic offline evaluator driven by fixture tables and a seed.
#[derive(Debug, Clone)]
pub struct StubEvaluator {
    seed: u64,
    table: FixtureTable,
}

pub const FIXTURE_CONFIDENCE: f64 = 0.95;
pub const FALLBACK_CONFIDENCE: f64 = 0.5;

impl StubEvaluator {
    pub fn new(seed: u64, table: FixtureTable) -> Self {
        StubEvaluator { seed, table }
    }

    pub fn table(&self) -> &FixtureTable {
        &self.table
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform value in [0,1) derived from the seed and the pair.
    pub fn hashed_score(&self, action: &ActionRecord, context: &ContextItem, dimension: &Dimension) -> f64 {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        for part in [
            &action.action,
            &action.intent,
            &context.context_id,
            &context.label,
            &dimension.dimension_id,
        ] {
            bytes.extend_from_slice(part.as_bytes());
            bytes.push(0);
        }
        (fnv1a(&bytes) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn best_row(&self, action: &ActionRecord, context: &ContextItem, dimension: &Dimension) -> Option<(usize, &FixtureRow)> {
        let mut best: Option<(u8, usize, &FixtureRow)> = None;
        for (i, r) in self.table.rows.iter().enumerate() {
            if let Some(s) = r.specificity(action, context, dimension) {
                if best.is_none_or(|(b, _, _)| s > b) {
                    best = Some((s, i, r));
                }
            }
        }
        best.map(|(_, i, r)| (i, r))
    }

    fn score(&self, req: &ScoreRequest, deep: bool) -> EvaluatorResponse {
        let (score, confidence, rationale) = match self.best_row(&req.action, &req.context, &req.dimension) {
            Some((i, r)) => {
                let why = if deep {
                    format!(
                        "fixture row {i} (context {}, dimension {}) pins {} for {} under {}",
                        r.context, r.dimension, r.score, req.dimension.label, req.context.label
                    )
                } else {
                    format!("fixture row {i}")
                };
                (r.score, FIXTURE_CONFIDENCE, why)
            }
            None => (
                self.hashed_score(&req.action, &req.context, &req.dimension),
                FALLBACK_CONFIDENCE,
                "no fixture row, seeded estimate".to_string(),
            ),
        };
        EvaluatorResponse {
            kind: RequestKind::ScorePair,
            payload: json!({ "score": score }),
            confidence,
            rationale,
        }
    }

    fn propose_dimensions(&self, action: &ActionRecord) -> (Vec<Dimension>, Vec<String>) {
        let words: BTreeSet<String> = [&action.action, &action.intent]
            .iter()
            .flat_map(|s| {
                s.split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty())
                    .map(str::to_lowercase)
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut out: Vec<Dimension> = Vec::new();
        let mut hits = Vec::new();
        for rule in &self.table.keywords {
            if !words.contains(&rule.keyword.to_lowercase()) {
                continue;
            }
            hits.push(rule.keyword.clone());
            for d in &rule.dimensions {
                if !out.iter().any(|o| o.dimension_id == d.dimension_id) {
                    out.push(d.clone());
                }
            }
        }
        (out, hits)
    }
}

#[derive(Deserialize)]
struct ActionOnly {
    action: ActionRecord,
}

#[derive(Deserialize)]
struct ScoreRequest {
    action: ActionRecord,
    context: ContextItem,
    dimension: Dimension,
}

#[derive(Deserialize)]
struct MitigationRequest {
    action: ActionRecord,
    targets: Vec<PairKey>,
}

#[derive(Deserialize)]
struct QuestionRequest {
    flags: Vec<UncertaintyFlag>,
}

fn bad_request(kind: RequestKind, e: serde_json::Error) -> AuraError {
    AuraError::AdapterFailure(format!("{} request malformed: {e}", kind.as_str()))
}

pub fn question_text(flag: &UncertaintyFlag) -> String {
    let refs = flag.refs.join(", ");
    let why = flag.cause.describe();
    match flag.component {
        Component::PairScore => format!(
            "How risky is this action along dimension '{}' given context '{}'? ({why})",
            flag.refs.get(1).map(String::as_str).unwrap_or("?"),
            flag.refs.first().map(String::as_str).unwrap_or("?"),
        ),
        Component::Dimension => format!(
            "Is dimension '{}' relevant here, and are its scores across contexts right? ({why})",
            flag.refs.first().map(String::as_str).unwrap_or("?"),
        ),
        Component::Context => format!("Is any situational context missing or mislabelled among [{refs}]? ({why})"),
        Component::Weight => format!("Should the importance of [{refs}] be adjusted? ({why})"),
        Component::Mitigation => format!("Which safeguards should apply to this action, given [{refs}]? ({why})"),
    }
}

impl EvaluatorAdapter for StubEvaluator {
    fn name(&self) -> &str {
        "stub"
    }

    fn call(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse> {
        let kind = request.kind;
        let p = &request.payload;
        Ok(match kind {
            RequestKind::ParseContext => {
                let a: ActionOnly = serde_json::from_value(p.clone()).map_err(|e| bad_request(kind, e))?;
                let items = declared_contexts(&a.action, &self.table.context_aliases);
                EvaluatorResponse {
                    kind,
                    payload: json!({ "items": items }),
                    confidence: FIXTURE_CONFIDENCE,
                    rationale: format!("{} declared context item(s)", items.len()),
                }
            }
            RequestKind::ProposeDimensions => {
                let a: ActionOnly = serde_json::from_value(p.clone()).map_err(|e| bad_request(kind, e))?;
                let (dims, hits) = self.propose_dimensions(&a.action);
                EvaluatorResponse {
                    kind,
                    payload: json!({ "dimensions": dims }),
                    confidence: FIXTURE_CONFIDENCE,
                    rationale: if hits.is_empty() {
                        "no keyword matched".into()
                    } else {
                        format!("keywords: {}", hits.join(", "))
                    },
                }
            }
            RequestKind::ScorePair => {
                let r: ScoreRequest = serde_json::from_value(p.clone()).map_err(|e| bad_request(kind, e))?;
                self.score(&r, request.budget.deep)
            }
            RequestKind::ProposeMitigations => {
                let r: MitigationRequest = serde_json::from_value(p.clone()).map_err(|e| bad_request(kind, e))?;
                let mut dims: Vec<&str> = Vec::new();
                for t in &r.targets {
                    if !dims.contains(&t.dimension_id.as_str()) {
                        dims.push(&t.dimension_id);
                    }
                }
                let items: Vec<Value> = dims
                    .iter()
                    .take(3)
                    .map(|d| {
                        let m = Mitigation::new(&format!("confirm-{}-{}", slug(&r.action.action), d), Primitive::Guardrail)
                            .with_param("require_confirmation", true)
                            .with_steps(&[&format!("Ask the user to confirm before continuing ({d} risk)")]);
                        let mut m = m;
                        m.rewrite_capable = true;
                        m.provenance = MitigationProvenance::ModelProposed;
                        serde_json::to_value(m).expect("mitigation serializes")
                    })
                    .collect();
                EvaluatorResponse {
                    kind,
                    payload: json!({ "mitigations": items }),
                    confidence: FALLBACK_CONFIDENCE,
                    rationale: format!("confirmation guardrail for {} target dimension(s)", dims.len().min(3)),
                }
            }
            RequestKind::GenerateQuestions => {
                let r: QuestionRequest = serde_json::from_value(p.clone()).map_err(|e| bad_request(kind, e))?;
                let qs: Vec<String> = r.flags.iter().map(question_text).collect();
                EvaluatorResponse {
                    kind,
                    payload: json!({ "questions": qs }),
                    confidence: FIXTURE_CONFIDENCE,
                    rationale: "template questions".into(),
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hitl::Cause;
    use crate::model::DataSensitivity;

    fn case_study() -> ActionRecord {
        ActionRecord::new("submit_form", "account_signup", "web_agent")
            .with_tags(&["untrusted_domain", "evening"])
            .with_fact("verified_user", false)
            .with_sensitivity(DataSensitivity::Medium)
    }

    fn stub(rows: Vec<FixtureRow>) -> Evaluator {
        let table = FixtureTable {
            rows,
            ..Default::default()
        };
        Evaluator::new(Arc::new(StubEvaluator::new(7, table)), Budget::default())
    }

    fn row(pattern: &str, context: &str, dimension: &str, score: f64) -> FixtureRow {
        FixtureRow {
            action_id: None,
            pattern: Some(pattern.into()),
            context: context.into(),
            dimension: dimension.into(),
            score,
        }
    }

    #[test]
    fn case_study_contexts() {
        let ev = stub(vec![]);
        let m = CallMeter::unlimited();
        let items = ev.parse_context(&m, &case_study()).unwrap().items;
        let ids: Vec<_> = items.iter().map(|c| c.context_id.as_str()).collect();
        assert_eq!(ids, vec!["site_trust", "time_of_day", "verified_user", "data_sensitivity", "intent"]);
        let labels: Vec<_> = items.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, vec!["untrusted_domain", "evening", "false", "medium", "account_signup"]);
        assert_eq!(ev.parse_context(&m, &case_study()).unwrap().items, items);
        assert_eq!(m.calls(RequestKind::ParseContext), 2);
    }

    #[test]
    fn empty_facts_give_intent_only() {
        let items = declared_contexts(&ActionRecord::new("noop", "", "a"), &default_context_aliases());
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].context_id, "intent");
    }

    #[test]
    fn repeated_time_tags_get_distinct_ids() {
        let a = ActionRecord::new("x", "y", "z").with_tags(&["morning", "evening", "night"]);
        let ids: Vec<_> = declared_contexts(&a, &default_context_aliases())
            .into_iter()
            .map(|c| c.context_id)
            .collect();
        assert_eq!(ids, vec!["time_of_day", "time_of_day_2", "time_of_day_3", "intent"]);
    }

    #[test]
    fn fixture_specificity() {
        let ev = stub(vec![
            row("submit_form", "*", "consent", 0.8),
            row("submit_form", "time_of_day", "consent", 0.3),
            row("*", "*", "*", 0.1),
        ]);
        let m = CallMeter::unlimited();
        let a = case_study();
        let consent = Dimension::new("consent", "Consent", Tier::Field);
        let night = ContextItem::new("time_of_day", "evening", Derivation::Declared);
        let site = ContextItem::new("site_trust", "untrusted_domain", Derivation::Declared);
        assert_eq!(ev.score_pair(&m, &a, &night, &consent).unwrap().score, 0.3);
        let s = ev.score_pair(&m, &a, &site, &consent).unwrap();
        assert_eq!((s.score, s.confidence), (0.8, FIXTURE_CONFIDENCE));
        let other = Dimension::new("security", "Security", Tier::Core);
        assert_eq!(ev.score_pair(&m, &a, &site, &other).unwrap().score, 0.1);
        assert_eq!(m.calls(RequestKind::ScorePair), 3);
    }

    #[test]
    fn hash_fallback_is_reproducible() {
        let ev = stub(vec![]);
        let m = CallMeter::unlimited();
        let c = ContextItem::new("site_trust", "untrusted_domain", Derivation::Declared);
        let d = Dimension::new("security", "Security", Tier::Core);
        let a = ev.score_pair(&m, &case_study(), &c, &d).unwrap();
        let b = ev.score_pair(&m, &case_study(), &c, &d).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.confidence, FALLBACK_CONFIDENCE);
        assert!((0.0..1.0).contains(&a.score));
        let other = Evaluator::new(Arc::new(StubEvaluator::new(8, FixtureTable::default())), Budget::default());
        assert_ne!(other.score_pair(&m, &case_study(), &c, &d).unwrap().score, a.score);
    }

    #[test]
    fn signup_keywords() {
        let ev = stub(vec![]);
        let m = CallMeter::unlimited();
        let dims = ev.propose_dimensions(&m, &case_study(), &[]).unwrap().items;
        let ids: Vec<_> = dims.iter().map(|d| d.dimension_id.as_str()).collect();
        assert_eq!(ids, vec!["consent", "reversibility", "cascading-impact", "privacy"]);
        let none = ev
            .propose_dimensions(&m, &ActionRecord::new("read_page", "browse", "a"), &[])
            .unwrap()
            .items;
        assert!(none.is_empty());
        // "account" and "signup" both hit the same dimensions
        let dup = ev
            .propose_dimensions(&m, &ActionRecord::new("account", "signup", "a"), &[])
            .unwrap()
            .items;
        assert_eq!(dup.len(), 4);
    }

    #[test]
    fn questions_one_per_flag() {
        let ev = stub(vec![]);
        let m = CallMeter::unlimited();
        assert!(matches!(ev.generate_questions(&m, &[]), Err(AuraError::Precondition(_))));
        let flag = |c: &str| UncertaintyFlag {
            component: Component::PairScore,
            refs: vec![c.into(), "consent".into()],
            cause: Cause::LowConfidence,
            severity: 0.5,
        };
        let qs = ev.generate_questions(&m, &[flag("a"), flag("b"), flag("c")]).unwrap();
        assert_eq!(qs.len(), 3);
        assert!(qs[1].contains("'b'") && qs[1].contains("consent"));
    }

    struct Broken(Value, f64);

    impl EvaluatorAdapter for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn call(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse> {
            Ok(EvaluatorResponse {
                kind: request.kind,
                payload: self.0.clone(),
                confidence: self.1,
                rationale: String::new(),
            })
        }
    }

    #[test]
    fn schema_violations_become_adapter_failures() {
        let m = CallMeter::unlimited();
        let c = ContextItem::new("x", "y", Derivation::Declared);
        let d = Dimension::new("security", "Security", Tier::Core);
        let a = case_study();
        for (payload, conf) in [
            (json!({ "score": 1.5 }), 0.9),
            (json!({ "score": 0.5, "extra": 1 }), 0.9),
            (json!({ "value": 0.5 }), 0.9),
            (json!({ "score": 0.5 }), 1.2),
        ] {
            let ev = Evaluator::new(Arc::new(Broken(payload, conf)), Budget::default());
            assert!(matches!(ev.score_pair(&m, &a, &c, &d), Err(AuraError::AdapterFailure(_))));
        }
        let ev = Evaluator::new(
            Arc::new(Broken(json!({ "dimensions": [Dimension::new("x", "X", Tier::Core)] }), 0.9)),
            Budget::default(),
        );
        assert!(matches!(ev.propose_dimensions(&m, &a, &[]), Err(AuraError::AdapterFailure(_))));
        let ev = Evaluator::new(Arc::new(Broken(json!({ "items": [] }), 0.9)), Budget::default());
        assert!(matches!(ev.parse_context(&m, &a), Err(AuraError::AdapterFailure(_))));
    }

    struct Slow;

    impl EvaluatorAdapter for Slow {
        fn name(&self) -> &str {
            "slow"
        }
        fn call(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse> {
            std::thread::sleep(Duration::from_millis(20));
            Ok(EvaluatorResponse {
                kind: request.kind,
                payload: json!({ "score": 0.5 }),
                confidence: 0.9,
                rationale: String::new(),
            })
        }
    }

    #[test]
    fn latency_and_call_budgets() {
        let budget = Budget {
            max_calls: Some(1),
            max_latency_ms: Some(1),
            deep: false,
        };
        let ev = Evaluator::new(Arc::new(Slow), budget);
        let m = CallMeter::new(&budget);
        let c = ContextItem::new("x", "y", Derivation::Declared);
        let d = Dimension::new("security", "Security", Tier::Core);
        assert!(matches!(ev.score_pair(&m, &case_study(), &c, &d), Err(AuraError::AdapterTimeout(_))));
        assert!(matches!(ev.score_pair(&m, &case_study(), &c, &d), Err(AuraError::AdapterFailure(_))));
        assert_eq!(m.counts().total, 1);
    }

    #[test]
    fn fixture_table_loading() {
        let t = FixtureTable::from_json_str(r#"[{"pattern":"a","context":"*","dimension":"*","score":0.2}]"#).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(!t.keywords.is_empty());
        assert!(FixtureTable::from_json_str(r#"[{"context":"*","dimension":"*","score":0.2}]"#).is_err());
        assert!(FixtureTable::from_json_str(r#"[{"pattern":"a","context":"*","dimension":"*","score":2}]"#).is_err());
        assert!(glob("submit_*", "submit_form") && glob("*_form", "submit_form") && glob("*mit*", "submit_form"));
    }
}
