//! Shared domain types: actions, contexts, dimensions, weights, scores and
//! the risk profile emitted for every assessed action.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::profiling::{ProfileBreakdown, Quadrant};

/// Absolute tolerance used for every floating point comparison.
pub const EPS: f64 = 1e-9;

/// A raw situational fact attached to an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FactValue {
    Bool(bool),
    Number(serde_json::Number),
    Text(String),
    List(Vec<FactValue>),
}

impl FactValue {
    /// Flat textual rendering used for labels, embeddings and trigger matching.
    pub fn render(&self) -> String {
        match self {
            FactValue::Bool(b) => b.to_string(),
            FactValue::Number(n) => n.to_string(),
            FactValue::Text(s) => s.clone(),
            FactValue::List(items) => items
                .iter()
                .map(FactValue::render)
                .collect::<Vec<_>>()
                .join(","),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FactValue::Number(n) => n.as_f64(),
            FactValue::Text(s) => s.parse().ok(),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    pub fn from_json(value: &serde_json::Value) -> Option<FactValue> {
        serde_json::from_value(value.clone()).ok()
    }
}

impl From<bool> for FactValue {
    fn from(v: bool) -> Self {
        FactValue::Bool(v)
    }
}

impl From<&str> for FactValue {
    fn from(v: &str) -> Self {
        FactValue::Text(v.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSensitivity {
    Low,
    Medium,
    High,
}

impl DataSensitivity {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataSensitivity::Low => "low",
            DataSensitivity::Medium => "medium",
            DataSensitivity::High => "high",
        }
    }
}

/// The atomic unit of agent behaviour under assessment.
///
/// Deserialization accepts both the canonical shape (facts nested under
/// `context_facts`) and the flat shape agents usually emit, where every
/// unknown top-level key is a context fact:
///
/// ```json
/// { "action": "submit_form", "intent": "account_signup", "actor": "web_agent",
///   "context": ["untrusted_domain", "evening"], "verified_user": false }
/// ```
///
/// A missing `action_id` is derived deterministically from the content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAction")]
pub struct ActionRecord {
    pub action_id: String,
    pub action: String,
    pub intent: String,
    pub actor: String,
    pub context_facts: BTreeMap<String, FactValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_sensitivity: Option<DataSensitivity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Deserialize)]
struct RawAction {
    #[serde(default)]
    action_id: Option<String>,
    action: String,
    #[serde(default)]
    intent: String,
    #[serde(default)]
    actor: String,
    #[serde(default)]
    context_facts: Option<BTreeMap<String, FactValue>>,
    #[serde(default)]
    data_sensitivity: Option<DataSensitivity>,
    #[serde(default)]
    timestamp: Option<DateTime<Utc>>,
    #[serde(flatten)]
    extra: BTreeMap<String, FactValue>,
}

impl TryFrom<RawAction> for ActionRecord {
    type Error = String;

    fn try_from(raw: RawAction) -> Result<Self, Self::Error> {
        let mut facts = raw.context_facts.unwrap_or_default();
        for (k, v) in raw.extra {
            if facts.contains_key(&k) {
                return Err(format!("context fact '{k}' declared twice"));
            }
            facts.insert(k, v);
        }
        let mut record = ActionRecord {
            action_id: String::new(),
            action: raw.action,
            intent: raw.intent,
            actor: raw.actor,
            context_facts: facts,
            data_sensitivity: raw.data_sensitivity,
            timestamp: raw.timestamp,
        };
        record.action_id = match raw.action_id {
            Some(id) => id,
            None => record.derived_id(),
        };
        Ok(record)
    }
}

impl ActionRecord {
    pub fn new(action: &str, intent: &str, actor: &str) -> Self {
        let mut record = ActionRecord {
            action_id: String::new(),
            action: action.to_string(),
            intent: intent.to_string(),
            actor: actor.to_string(),
            context_facts: BTreeMap::new(),
            data_sensitivity: None,
            timestamp: None,
        };
        record.action_id = record.derived_id();
        record
    }

    pub fn with_id(mut self, id: &str) -> Self {
        self.action_id = id.to_string();
        self
    }

    pub fn with_fact(mut self, key: &str, value: impl Into<FactValue>) -> Self {
        self.context_facts.insert(key.to_string(), value.into());
        self
    }

    pub fn with_tags(mut self, tags: &[&str]) -> Self {
        self.context_facts.insert(
            "context".into(),
            FactValue::List(tags.iter().map(|t| FactValue::from(*t)).collect()),
        );
        self
    }

    pub fn with_sensitivity(mut self, s: DataSensitivity) -> Self {
        self.data_sensitivity = Some(s);
        self
    }

    /// Human readable slug plus a content hash suffix.
    pub fn derived_id(&self) -> String {
        let mut probe = self.clone();
        probe.action_id = String::new();
        probe.timestamp = None;
        let canonical = serde_json::to_string(&probe).unwrap_or_default();
        format!("{}-{:08x}", slug(&self.action), fnv1a(canonical.as_bytes()) as u32)
    }

    pub fn fact(&self, key: &str) -> Option<&FactValue> {
        self.context_facts.get(key)
    }

    /// Every string an agent-facing guardrail can match against.
    pub fn searchable_text(&self) -> String {
        let mut parts = vec![self.action.clone(), self.intent.clone()];
        for (k, v) in &self.context_facts {
            parts.push(format!("{k}={}", v.render()));
        }
        parts.join(" ").to_lowercase()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Derivation {
    Declared,
    Parsed,
    MemoryReused,
    HitlAdded,
}

/// Situational information conditioning an action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextItem {
    pub context_id: String,
    pub label: String,
    pub derivation: Derivation,
}

impl ContextItem {
    pub fn new(id: &str, label: &str, derivation: Derivation) -> Self {
        ContextItem {
            context_id: id.to_string(),
            label: label.to_string(),
            derivation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Core,
    Field,
    Action,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Core, Tier::Field, Tier::Action];

    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Core => "core",
            Tier::Field => "field",
            Tier::Action => "action",
        }
    }
}

/// An axis of risk analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub dimension_id: String,
    pub label: String,
    pub tier: Tier,
    #[serde(default)]
    pub description: String,
}

impl Dimension {
    pub fn new(id: &str, label: &str, tier: Tier) -> Self {
        Dimension {
            dimension_id: id.to_string(),
            label: label.to_string(),
            tier,
            description: String::new(),
        }
    }

    pub fn describe(mut self, description: &str) -> Self {
        self.description = description.to_string();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Equal,
    Frequency,
    #[default]
    Custom,
}

/// Dimension budgets `u_d` and per-dimension context weights `p(c|d)`.
///
/// The applicable context set of a dimension is the key set of its entry in
/// `context_weights`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightScheme {
    pub dimension_weights: BTreeMap<String, f64>,
    pub context_weights: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub scheme_kind: SchemeKind,
}

impl WeightScheme {
    pub fn u_total(&self) -> f64 {
        self.dimension_weights.values().sum()
    }

    pub fn u(&self, dimension_id: &str) -> f64 {
        self.dimension_weights.get(dimension_id).copied().unwrap_or(0.0)
    }

    pub fn p(&self, context_id: &str, dimension_id: &str) -> Option<f64> {
        self.context_weights
            .get(dimension_id)
            .and_then(|m| m.get(context_id))
            .copied()
    }

    /// Joint pair weight `w(c,d) = u_d * p(c|d)`.
    pub fn joint_weight(&self, context_id: &str, dimension_id: &str) -> f64 {
        self.u(dimension_id) * self.p(context_id, dimension_id).unwrap_or(0.0)
    }

    /// Every (context, dimension) pair with a defined context weight.
    pub fn pairs(&self) -> Vec<PairKey> {
        let mut out = Vec::new();
        for (d, ctx) in &self.context_weights {
            for c in ctx.keys() {
                out.push(PairKey::new(c, d));
            }
        }
        out.sort();
        out
    }

    /// Uniform `p(c|d)` over the given contexts.
    pub fn set_uniform_contexts(&mut self, dimension_id: &str, contexts: &[String]) {
        let mut m = BTreeMap::new();
        if !contexts.is_empty() {
            let p = 1.0 / contexts.len() as f64;
            for c in contexts {
                m.insert(c.clone(), p);
            }
        }
        self.context_weights.insert(dimension_id.to_string(), m);
    }

    /// Rescale `p(c|d)` for one dimension so that it sums to one again.
    pub fn renormalize(&mut self, dimension_id: &str) {
        if let Some(m) = self.context_weights.get_mut(dimension_id) {
            let sum: f64 = m.values().sum();
            if sum > 0.0 {
                for v in m.values_mut() {
                    *v /= sum;
                }
            } else if !m.is_empty() {
                let p = 1.0 / m.len() as f64;
                for v in m.values_mut() {
                    *v = p;
                }
            }
        }
    }
}

/// Key of a (context, dimension) pair. Orders by dimension first so that a
/// dimension's pairs are contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub context_id: String,
    pub dimension_id: String,
}

impl PairKey {
    pub fn new(context_id: &str, dimension_id: &str) -> Self {
        PairKey {
            context_id: context_id.to_string(),
            dimension_id: dimension_id.to_string(),
        }
    }
}

impl Ord for PairKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (&self.dimension_id, &self.context_id).cmp(&(&other.dimension_id, &other.context_id))
    }
}

impl PartialOrd for PairKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.context_id, self.dimension_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreProvenance {
    Evaluator,
    Memory,
    Hitl,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub score: f64,
    pub provenance: ScoreProvenance,
}

/// Sparse map of pair scores. Absent pairs are "not applicable".
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "Vec<ScoredPair>", from = "Vec<ScoredPair>")]
pub struct ScoreMatrix {
    pub entries: BTreeMap<PairKey, ScoreEntry>,
}

/// Wire form of one score matrix entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub context_id: String,
    pub dimension_id: String,
    pub score: f64,
    pub provenance: ScoreProvenance,
}

impl From<ScoreMatrix> for Vec<ScoredPair> {
    fn from(m: ScoreMatrix) -> Self {
        m.entries
            .into_iter()
            .map(|(k, e)| ScoredPair {
                context_id: k.context_id,
                dimension_id: k.dimension_id,
                score: e.score,
                provenance: e.provenance,
            })
            .collect()
    }
}

impl From<Vec<ScoredPair>> for ScoreMatrix {
    fn from(v: Vec<ScoredPair>) -> Self {
        let entries = v
            .into_iter()
            .map(|p| {
                (
                    PairKey::new(&p.context_id, &p.dimension_id),
                    ScoreEntry {
                        score: p.score,
                        provenance: p.provenance,
                    },
                )
            })
            .collect();
        ScoreMatrix { entries }
    }
}

impl ScoreMatrix {
    pub fn set(&mut self, context_id: &str, dimension_id: &str, score: f64, provenance: ScoreProvenance) {
        self.entries
            .insert(PairKey::new(context_id, dimension_id), ScoreEntry { score, provenance });
    }

    pub fn get(&self, context_id: &str, dimension_id: &str) -> Option<f64> {
        self.entries
            .get(&PairKey::new(context_id, dimension_id))
            .map(|e| e.score)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Decision emitted for an action. Ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Warn,
    Rewrite,
    Block,
    Escalate,
}

impl Decision {
    /// Block and escalate stop a mitigation chain.
    pub fn is_terminal(&self) -> bool {
        matches!(self, Decision::Block | Decision::Escalate)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Allow => "allow",
            Decision::Warn => "warn",
            Decision::Rewrite => "rewrite",
            Decision::Block => "block",
            Decision::Escalate => "escalate",
        }
    }

    pub fn parse(s: &str) -> Option<Decision> {
        match s.trim().to_ascii_lowercase().as_str() {
            "allow" | "approve" => Some(Decision::Allow),
            "warn" => Some(Decision::Warn),
            "rewrite" => Some(Decision::Rewrite),
            "block" => Some(Decision::Block),
            "escalate" => Some(Decision::Escalate),
            _ => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub variance: f64,
    pub concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopDimension {
    pub dimension_id: String,
    pub label: String,
    pub score: f64,
}

/// Structured representation of one action's risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub action_id: String,
    pub gamma: f64,
    pub u_total: f64,
    pub gamma_norm: f64,
    pub uncertainty: Uncertainty,
    pub level: String,
    pub decision: Decision,
    pub quadrant: Quadrant,
    pub top_dimensions: Vec<TopDimension>,
    pub breakdown: ProfileBreakdown,
    pub mitigation_id: Option<String>,
    pub mitigation_ids: Vec<String>,
    pub mitigation_steps: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub trace_id: String,
    #[serde(default = "one")]
    pub version: u32,
}

fn one() -> u32 {
    1
}

impl RiskProfile {
    /// Field-for-field equality ignoring the run identifier.
    pub fn same_assessment(&self, other: &RiskProfile) -> bool {
        let mut a = self.clone();
        a.trace_id = other.trace_id.clone();
        &a == other
    }

    /// The profile with `gamma_norm` expressed on the 0.0–1.0 scale.
    pub fn fractional(&self) -> RiskProfile {
        let mut p = self.clone();
        p.gamma_norm /= 100.0;
        p
    }
}

/// One broken invariant found by [`validate_assessment_inputs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub invariant: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, invariant: &str, message: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            invariant: invariant.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.message, self.invariant)
    }
}

pub fn validate_action(action: &ActionRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if action.action_id.trim().is_empty() {
        out.push(Violation::new("action.action_id", "non-empty", "action_id is empty"));
    }
    if action.action.trim().is_empty() {
        out.push(Violation::new("action.action", "non-empty", "action verb is empty"));
    }
    out
}

/// Checks every invariant of the assessment inputs. Never fails; an empty
/// report means the inputs are consistent.
pub fn validate_assessment_inputs(
    action: &ActionRecord,
    dims: &[Dimension],
    weights: &WeightScheme,
    scores: &ScoreMatrix,
) -> Vec<Violation> {
    let mut out = validate_action(action);

    let mut seen = BTreeSet::new();
    for d in dims {
        if !seen.insert(d.dimension_id.as_str()) {
            out.push(Violation::new(
                format!("dimensions.{}", d.dimension_id),
                "unique dimension_id",
                "dimension declared twice",
            ));
        }
    }

    for d in weights.dimension_weights.keys() {
        if !seen.is_empty() && !seen.contains(d.as_str()) {
            out.push(Violation::new(
                format!("weights.dimension_weights.{d}"),
                "known dimension",
                "weight given for an undeclared dimension",
            ));
        }
    }
    out.extend(validate_weights_and_scores(weights, scores));
    out
}

/// The weight and score invariants alone: `u_d >= 0`, `p(c|d)` in [0,1]
/// summing to one per dimension, scores in [0,1] with a defined `p(c|d)`.
pub fn validate_weights_and_scores(weights: &WeightScheme, scores: &ScoreMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    for (d, u) in &weights.dimension_weights {
        if !u.is_finite() || *u < 0.0 {
            out.push(Violation::new(
                format!("weights.dimension_weights.{d}"),
                "u_d >= 0",
                format!("dimension weight {u} is negative or not finite"),
            ));
        }
    }

    for (d, ctx) in &weights.context_weights {
        for (c, p) in ctx {
            if !p.is_finite() || *p < 0.0 || *p > 1.0 {
                out.push(Violation::new(
                    format!("weights.context_weights.{d}.{c}"),
                    "p(c|d) in [0,1]",
                    format!("context weight {p} out of [0,1]"),
                ));
            }
        }
        if !ctx.is_empty() {
            let sum: f64 = ctx.values().sum();
            if (sum - 1.0).abs() > EPS {
                out.push(Violation::new(
                    format!("weights.context_weights.{d}"),
                    "sum p(c|d) = 1",
                    format!("context weights of dimension '{d}' sum to {sum}"),
                ));
            }
        }
    }

    for (key, entry) in &scores.entries {
        if !entry.score.is_finite() || entry.score < 0.0 || entry.score > 1.0 {
            out.push(Violation::new(
                format!("scores.{}.{}", key.context_id, key.dimension_id),
                "s(c,d) in [0,1]",
                format!("score out of [0,1]: {}", entry.score),
            ));
        }
        if weights.p(&key.context_id, &key.dimension_id).is_none() {
            out.push(Violation::new(
                format!("scores.{}.{}", key.context_id, key.dimension_id),
                "p(c|d) defined",
                "scored pair has no context weight",
            ));
        }
    }
    out
}

/// Lowercase, hyphenated slug.
pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut dash = false;
    for ch in s.trim().chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
            dash = false;
        } else if !dash && !out.is_empty() {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        "item".into()
    } else {
        out
    }
}

/// 64-bit FNV-1a. Stable across platforms; used for ids, embeddings and
/// seeded fallback scores.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Accepts a threshold on either the 0–100 or the 0.0–1.0 scale and returns
/// it on the canonical 0–100 scale. Values up to and including 1.0 are read
/// as fractions.
pub fn to_percent_scale(value: f64) -> Option<f64> {
    if !value.is_finite() || value < 0.0 || value > 100.0 {
        None
    } else if value <= 1.0 {
        Some((value * 100.0 * 1e9).round() / 1e9)
    } else {
        Some(value)
    }
}
