//! Human-in-the-loop refinement: uncertainty detection, question sessions and
//! incremental re-scoring from structured answers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{AuraError, Result};
use crate::memory::{MatchKind, MatchResult};
use crate::model::{PairKey, ScoreMatrix, ScoreProvenance, Tier, WeightScheme};
use crate::scoring::{concentration, GammaResult, PairContribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Context,
    Dimension,
    PairScore,
    Weight,
    Mitigation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    HighVariance,
    SparseMemory,
    ConflictingScores,
    MemoryRequiresHitl,
    LowConfidence,
}

impl Cause {
    pub fn describe(&self) -> &'static str {
        match self {
            Cause::HighVariance => "risk is concentrated in a few pairs",
            Cause::SparseMemory => "no close precedent in memory",
            Cause::ConflictingScores => "scores disagree across contexts",
            Cause::MemoryRequiresHitl => "human review is required for this case",
            Cause::LowConfidence => "the estimate has low confidence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyFlag {
    pub component: Component,
    /// Component identifiers: `[context, dimension]` for a pair score,
    /// `[dimension]` for a dimension, the context ids for a context flag.
    pub refs: Vec<String>,
    pub cause: Cause,
    pub severity: f64,
}

impl UncertaintyFlag {
    pub fn new(component: Component, refs: Vec<String>, cause: Cause, severity: f64) -> Self {
        UncertaintyFlag {
            component,
            refs,
            cause,
            severity: severity.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitlConfig {
    pub variance_threshold: f64,
    pub confidence_threshold: f64,
    pub conflict_delta: f64,
    pub sparse_margin: f64,
}

impl Default for HitlConfig {
    fn default() -> Self {
        HitlConfig {
            variance_threshold: 0.05,
            confidence_threshold: 0.6,
            conflict_delta: 0.5,
            sparse_margin: 0.05,
        }
    }
}

pub struct DetectInput<'a> {
    pub result: &'a GammaResult,
    pub scores: &'a ScoreMatrix,
    pub context_ids: &'a [String],
    pub matched: &'a MatchResult,
    pub theta_near: f64,
    pub confidences: &'a BTreeMap<PairKey, f64>,
    /// Set when the profile was reused wholesale from a memory entry.
    pub exact_reuse: bool,
    /// Entry id and mitigation links of a reused entry carrying the
    /// human-review marker.
    pub review_marker: Option<(&'a str, &'a [String])>,
}

/// Flags for human review. On exact reuse only the entry's explicit review
/// marker is considered.
pub fn detect(input: &DetectInput<'_>, cfg: &HitlConfig) -> Vec<UncertaintyFlag> {
    let mut out = Vec::new();
    if let Some((entry, mitigations)) = input.review_marker {
        let mut refs = vec![entry.to_string()];
        refs.extend(mitigations.iter().cloned());
        out.push(UncertaintyFlag::new(Component::Mitigation, refs, Cause::MemoryRequiresHitl, 1.0));
    }
    if input.exact_reuse {
        return out;
    }
    let r = input.result;
    if r.variance >= cfg.variance_threshold {
        if let Some(top) = r
            .pair_contributions
            .iter()
            .max_by(|a, b| a.contribution.total_cmp(&b.contribution).then_with(|| b.key().cmp(&a.key())))
        {
            out.push(UncertaintyFlag::new(
                Component::PairScore,
                vec![top.context_id.clone(), top.dimension_id.clone()],
                Cause::HighVariance,
                r.variance / 0.25,
            ));
        }
    }
    let sparse = match input.matched.kind {
        MatchKind::None => true,
        _ => input
            .matched
            .top_similarity()
            .is_none_or(|s| s < input.theta_near + cfg.sparse_margin),
    };
    if sparse {
        let sim = input.matched.top_similarity().unwrap_or(0.0);
        out.push(UncertaintyFlag::new(
            Component::Context,
            input.context_ids.to_vec(),
            Cause::SparseMemory,
            1.0 - sim.max(0.0),
        ));
    }
    let mut by_dim: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (k, e) in &input.scores.entries {
        by_dim.entry(k.dimension_id.as_str()).or_default().push(e.score);
    }
    for (d, s) in by_dim {
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo >= cfg.conflict_delta {
            out.push(UncertaintyFlag::new(
                Component::Dimension,
                vec![d.to_string()],
                Cause::ConflictingScores,
                hi - lo,
            ));
        }
    }
    for (k, c) in input.confidences {
        if *c < cfg.confidence_threshold {
            out.push(UncertaintyFlag::new(
                Component::PairScore,
                vec![k.context_id.clone(), k.dimension_id.clone()],
                Cause::LowConfidence,
                1.0 - c,
            ));
        }
    }
    out
}

/// One flag per component; the most severe cause wins, first seen on ties.
pub fn dedupe_flags(flags: &[UncertaintyFlag]) -> Vec<UncertaintyFlag> {
    let mut out: Vec<UncertaintyFlag> = Vec::new();
    for f in flags {
        match out.iter_mut().find(|o| o.component == f.component && o.refs == f.refs) {
            Some(o) if f.severity > o.severity => *o = f.clone(),
            Some(_) => {}
            None => out.push(f.clone()),
        }
    }
    out
}

/// A structured change carried by an answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    OverrideScore {
        context_id: String,
        dimension_id: String,
        score: f64,
    },
    SetDimensionWeight {
        dimension_id: String,
        weight: f64,
    },
    /// Sets `p(c|d)` before renormalising the dimension.
    SetContextWeight {
        context_id: String,
        dimension_id: String,
        weight: f64,
    },
    /// New context applicable to the listed dimensions with the given
    /// scores. Its weight defaults to the mean of the existing weights.
    AddContext {
        context_id: String,
        label: String,
        scores: BTreeMap<String, f64>,
    },
    AddDimension {
        dimension_id: String,
        label: String,
        #[serde(default = "field_tier")]
        tier: Tier,
        weight: f64,
        scores: BTreeMap<String, f64>,
    },
    AcceptMitigation {
        mitigation_id: String,
    },
    RejectMitigation {
        mitigation_id: String,
    },
}

fn field_tier() -> Tier {
    Tier::Field
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Answer {
    pub question_id: String,
    #[serde(default)]
    pub edits: Vec<Edit>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub rationale: String,
    #[serde(default)]
    pub skip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub text: String,
    pub component: Component,
    pub refs: Vec<String>,
    pub cause: Cause,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub skipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Applied,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlSession {
    pub session_id: String,
    /// Trace of the parked assessment.
    pub trace_id: String,
    pub action_id: String,
    pub status: SessionStatus,
    pub flags: Vec<UncertaintyFlag>,
    pub questions: Vec<Question>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_at: Option<DateTime<Utc>>,
}

impl HitlSession {
    /// Builds a session from deduplicated flags and their question texts.
    pub fn new(
        session_id: &str,
        trace_id: &str,
        action_id: &str,
        flags: Vec<UncertaintyFlag>,
        texts: Vec<String>,
        now: DateTime<Utc>,
    ) -> Result<Self> {
        if flags.is_empty() {
            return Err(AuraError::Precondition("a session needs at least one flag".into()));
        }
        if flags.len() != texts.len() {
            return Err(AuraError::Precondition(format!(
                "{} questions for {} flags",
                texts.len(),
                flags.len()
            )));
        }
        let questions = flags
            .iter()
            .zip(texts)
            .enumerate()
            .map(|(i, (f, text))| Question {
                question_id: format!("q{}", i + 1),
                text,
                component: f.component,
                refs: f.refs.clone(),
                cause: f.cause,
                answer: None,
                answered_at: None,
                skipped: false,
            })
            .collect();
        Ok(HitlSession {
            session_id: session_id.to_string(),
            trace_id: trace_id.to_string(),
            action_id: action_id.to_string(),
            status: SessionStatus::Open,
            flags,
            questions,
            created_at: now,
            closed_at: None,
        })
    }

    pub fn is_open(&self) -> bool {
        self.status == SessionStatus::Open
    }

    /// Records the answers and closes the session. Questions without an
    /// answer are marked skipped.
    pub fn record_answers(&mut self, answers: &[Answer], now: DateTime<Utc>) -> Result<()> {
        if !self.is_open() {
            return Err(AuraError::StaleSession(self.session_id.clone()));
        }
        let known: BTreeSet<&str> = self.questions.iter().map(|q| q.question_id.as_str()).collect();
        for a in answers {
            if !known.contains(a.question_id.as_str()) {
                return Err(AuraError::InvalidInput(format!(
                    "answer references unknown question '{}'",
                    a.question_id
                )));
            }
        }
        for q in &mut self.questions {
            match answers.iter().find(|a| a.question_id == q.question_id) {
                Some(a) if !a.skip => {
                    q.answer = Some(a.clone());
                    q.answered_at = Some(now);
                }
                _ => q.skipped = true,
            }
        }
        self.status = SessionStatus::Applied;
        self.closed_at = Some(now);
        Ok(())
    }

    pub fn abandon(&mut self, now: DateTime<Utc>) -> Result<()> {
        if !self.is_open() {
            return Err(AuraError::StaleSession(self.session_id.clone()));
        }
        self.status = SessionStatus::Abandoned;
        self.closed_at = Some(now);
        Ok(())
    }
}

/// Sessions keyed by id, with one session per parked trace.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<BTreeMap<String, HitlSession>>,
}

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, session_id: &str) -> Result<HitlSession> {
        self.sessions
            .read()
            .expect("session lock")
            .get(session_id)
            .cloned()
            .ok_or_else(|| AuraError::not_found("hitl session", session_id))
    }

    pub fn for_trace(&self, trace_id: &str) -> Option<HitlSession> {
        self.sessions
            .read()
            .expect("session lock")
            .values()
            .find(|s| s.trace_id == trace_id)
            .cloned()
    }

    /// Stores `session` unless the trace already has one, which is returned
    /// unchanged instead.
    pub fn open(&self, session: HitlSession) -> HitlSession {
        let mut map = self.sessions.write().expect("session lock");
        if let Some(existing) = map.values().find(|s| s.trace_id == session.trace_id) {
            return existing.clone();
        }
        map.insert(session.session_id.clone(), session.clone());
        session
    }

    pub fn put(&self, session: HitlSession) {
        self.sessions
            .write()
            .expect("session lock")
            .insert(session.session_id.clone(), session);
    }

    /// Runs `f` on the stored session under the write lock, so answer
    /// application is serialised per store.
    pub fn update<T>(&self, session_id: &str, f: impl FnOnce(&mut HitlSession) -> Result<T>) -> Result<T> {
        let mut map = self.sessions.write().expect("session lock");
        let s = map
            .get_mut(session_id)
            .ok_or_else(|| AuraError::not_found("hitl session", session_id))?;
        let mut next = s.clone();
        let out = f(&mut next)?;
        *s = next;
        Ok(out)
    }

    pub fn list(&self) -> Vec<HitlSession> {
        self.sessions.read().expect("session lock").values().cloned().collect()
    }

    pub fn replace_all(&self, sessions: Vec<HitlSession>) {
        *self.sessions.write().expect("session lock") =
            sessions.into_iter().map(|s| (s.session_id.clone(), s)).collect();
    }
}

/// Gamma state that refreshes only the pairs an edit touches.
#[derive(Debug, Clone)]
pub struct IncrementalGamma {
    weights: WeightScheme,
    scores: ScoreMatrix,
    /// `(w, s)` per scored pair.
    pairs: BTreeMap<PairKey, (f64, f64)>,
    gamma: f64,
    recomputed: usize,
}

impl IncrementalGamma {
    pub fn new(weights: WeightScheme, scores: ScoreMatrix) -> Result<Self> {
        let violations = crate::model::validate_weights_and_scores(&weights, &scores);
        if !violations.is_empty() {
            return Err(AuraError::Validation(violations));
        }
        let mut pairs = BTreeMap::new();
        let mut gamma = 0.0;
        for (k, e) in &scores.entries {
            let w = weights.joint_weight(&k.context_id, &k.dimension_id);
            gamma += w * e.score;
            pairs.insert(k.clone(), (w, e.score));
        }
        Ok(IncrementalGamma {
            weights,
            scores,
            pairs,
            gamma,
            recomputed: 0,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn weights(&self) -> &WeightScheme {
        &self.weights
    }

    pub fn scores(&self) -> &ScoreMatrix {
        &self.scores
    }

    /// Number of pair contributions refreshed since construction.
    pub fn recomputed_pairs(&self) -> usize {
        self.recomputed
    }

    fn refresh(&mut self, key: &PairKey) {
        let old = self.pairs.get(key).map(|(w, s)| w * s).unwrap_or(0.0);
        match self.scores.entries.get(key) {
            Some(e) => {
                let w = self.weights.joint_weight(&key.context_id, &key.dimension_id);
                self.gamma += w * e.score - old;
                self.pairs.insert(key.clone(), (w, e.score));
            }
            None => {
                self.gamma -= old;
                self.pairs.remove(key);
            }
        }
        self.recomputed += 1;
    }

    fn refresh_dimension(&mut self, dimension_id: &str) {
        let keys: Vec<PairKey> = self
            .scores
            .entries
            .keys()
            .filter(|k| k.dimension_id == dimension_id)
            .cloned()
            .collect();
        for k in keys {
            self.refresh(&k);
        }
    }

    fn check_score(score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(AuraError::InvalidInput(format!("score {score} outside [0,1]")));
        }
        Ok(())
    }

    pub fn override_score(&mut self, context_id: &str, dimension_id: &str, score: f64) -> Result<PairKey> {
        Self::check_score(score)?;
        if self.weights.p(context_id, dimension_id).is_none() {
            return Err(AuraError::not_found("pair", format!("({context_id}, {dimension_id})")));
        }
        self.scores.set(context_id, dimension_id, score, ScoreProvenance::Hitl);
        let key = PairKey::new(context_id, dimension_id);
        self.refresh(&key);
        Ok(key)
    }

    pub fn set_dimension_weight(&mut self, dimension_id: &str, weight: f64) -> Result<()> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(AuraError::InvalidInput(format!("dimension weight {weight} must be >= 0")));
        }
        if !self.weights.dimension_weights.contains_key(dimension_id) {
            return Err(AuraError::not_found("dimension", dimension_id));
        }
        self.weights.dimension_weights.insert(dimension_id.to_string(), weight);
        self.refresh_dimension(dimension_id);
        Ok(())
    }

    pub fn set_context_weight(&mut self, context_id: &str, dimension_id: &str, weight: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(AuraError::InvalidInput(format!("context weight {weight} outside [0,1]")));
        }
        let m = self
            .weights
            .context_weights
            .get_mut(dimension_id)
            .ok_or_else(|| AuraError::not_found("dimension", dimension_id))?;
        if !m.contains_key(context_id) {
            return Err(AuraError::not_found("pair", format!("({context_id}, {dimension_id})")));
        }
        m.insert(context_id.to_string(), weight);
        self.weights.renormalize(dimension_id);
        self.refresh_dimension(dimension_id);
        Ok(())
    }

    pub fn add_context(&mut self, context_id: &str, scores: &BTreeMap<String, f64>) -> Result<()> {
        for (d, s) in scores {
            Self::check_score(*s)?;
            if !self.weights.context_weights.contains_key(d) {
                return Err(AuraError::not_found("dimension", d.clone()));
            }
        }
        for (d, s) in scores {
            let m = self.weights.context_weights.get_mut(d).expect("checked above");
            let share = if m.is_empty() {
                1.0
            } else {
                m.values().sum::<f64>() / m.len() as f64
            };
            m.insert(context_id.to_string(), share);
            self.weights.renormalize(d);
            self.scores.set(context_id, d, *s, ScoreProvenance::Hitl);
            self.refresh_dimension(d);
        }
        Ok(())
    }

    pub fn add_dimension(&mut self, dimension_id: &str, weight: f64, scores: &BTreeMap<String, f64>) -> Result<()> {
        if self.weights.dimension_weights.contains_key(dimension_id) {
            return Err(AuraError::Duplicate {
                duplicate_of: dimension_id.to_string(),
            });
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(AuraError::InvalidInput(format!("dimension weight {weight} must be >= 0")));
        }
        if scores.is_empty() {
            return Err(AuraError::Precondition(format!(
                "dimension '{dimension_id}' needs at least one scored context"
            )));
        }
        for s in scores.values() {
            Self::check_score(*s)?;
        }
        self.weights.dimension_weights.insert(dimension_id.to_string(), weight);
        let contexts: Vec<String> = scores.keys().cloned().collect();
        self.weights.set_uniform_contexts(dimension_id, &contexts);
        for (c, s) in scores {
            self.scores.set(c, dimension_id, *s, ScoreProvenance::Hitl);
        }
        self.refresh_dimension(dimension_id);
        Ok(())
    }

    /// Current metrics in the same shape as a full evaluation.
    pub fn result(&self) -> GammaResult {
        let u_total = self.weights.u_total();
        let pair_contributions: Vec<PairContribution> = self
            .pairs
            .iter()
            .map(|(k, (w, s))| PairContribution {
                context_id: k.context_id.clone(),
                dimension_id: k.dimension_id.clone(),
                weight: *w,
                score: *s,
                contribution: w * s,
            })
            .collect();
        let mut dimension_risk: BTreeMap<String, f64> =
            self.weights.dimension_weights.keys().map(|d| (d.clone(), 0.0)).collect();
        for (k, (_, s)) in &self.pairs {
            let p = self.weights.p(&k.context_id, &k.dimension_id).unwrap_or(0.0);
            *dimension_risk.entry(k.dimension_id.clone()).or_default() += p * s;
        }
        if u_total <= 0.0 {
            return GammaResult {
                gamma: self.gamma,
                u_total,
                gamma_norm: 0.0,
                mean_weighted_score: 0.0,
                variance: 0.0,
                concentration: 0.0,
                pair_contributions,
                dimension_risk,
                degenerate: true,
            };
        }
        let mean = self.gamma / u_total;
        let spread: f64 = self.pairs.values().map(|(w, s)| w * (s - mean).powi(2)).sum();
        let variance = (spread / u_total).max(0.0);
        GammaResult {
            gamma: self.gamma,
            u_total,
            gamma_norm: (100.0 * self.gamma / u_total).clamp(0.0, 100.0),
            mean_weighted_score: mean,
            variance,
            concentration: concentration(variance),
            pair_contributions,
            dimension_risk,
            degenerate: false,
        }
    }
}

/// What a set of answers changed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefinementDelta {
    pub gamma_before: f64,
    pub gamma_after: f64,
    pub gamma_norm_before: f64,
    pub gamma_norm_after: f64,
    pub variance_before: f64,
    pub variance_after: f64,
    pub changed_pairs: Vec<PairKey>,
    pub edits_applied: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub added_contexts: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub added_dimensions: Vec<(String, String, Tier)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accepted_mitigations: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_mitigations: Vec<String>,
    pub skipped_questions: usize,
}

impl RefinementDelta {
    pub fn is_empty(&self) -> bool {
        self.edits_applied == 0
    }
}

/// Applies every edit of the session's recorded answers to `state`.
pub fn apply_edits(session: &HitlSession, state: &mut IncrementalGamma) -> Result<RefinementDelta> {
    let before = state.result();
    let mut delta = RefinementDelta {
        gamma_before: before.gamma,
        gamma_norm_before: before.gamma_norm,
        variance_before: before.variance,
        ..Default::default()
    };
    let mut changed = BTreeSet::new();
    for q in &session.questions {
        let Some(answer) = &q.answer else {
            delta.skipped_questions += 1;
            continue;
        };
        for edit in &answer.edits {
            match edit {
                Edit::OverrideScore {
                    context_id,
                    dimension_id,
                    score,
                } => {
                    changed.insert(state.override_score(context_id, dimension_id, *score)?);
                }
                Edit::SetDimensionWeight { dimension_id, weight } => {
                    state.set_dimension_weight(dimension_id, *weight)?;
                    changed.extend(pairs_of(state, dimension_id));
                }
                Edit::SetContextWeight {
                    context_id,
                    dimension_id,
                    weight,
                } => {
                    state.set_context_weight(context_id, dimension_id, *weight)?;
                    changed.extend(pairs_of(state, dimension_id));
                }
                Edit::AddContext {
                    context_id,
                    label,
                    scores,
                } => {
                    state.add_context(context_id, scores)?;
                    for d in scores.keys() {
                        changed.extend(pairs_of(state, d));
                    }
                    delta.added_contexts.push((context_id.clone(), label.clone()));
                }
                Edit::AddDimension {
                    dimension_id,
                    label,
                    tier,
                    weight,
                    scores,
                } => {
                    state.add_dimension(dimension_id, *weight, scores)?;
                    changed.extend(pairs_of(state, dimension_id));
                    delta.added_dimensions.push((dimension_id.clone(), label.clone(), *tier));
                }
                Edit::AcceptMitigation { mitigation_id } => delta.accepted_mitigations.push(mitigation_id.clone()),
                Edit::RejectMitigation { mitigation_id } => delta.rejected_mitigations.push(mitigation_id.clone()),
            }
            delta.edits_applied += 1;
        }
    }
    let after = state.result();
    delta.gamma_after = after.gamma;
    delta.gamma_norm_after = after.gamma_norm;
    delta.variance_after = after.variance;
    delta.changed_pairs = changed.into_iter().collect();
    Ok(delta)
}

fn pairs_of(state: &IncrementalGamma, dimension_id: &str) -> Vec<PairKey> {
    state
        .scores()
        .entries
        .keys()
        .filter(|k| k.dimension_id == dimension_id)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Neighbor;
    use crate::scoring::{evaluate, gamma_raw};
    use chrono::TimeZone;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 3, 1, 12, 0, 0).unwrap()
    }

    fn small() -> (WeightScheme, ScoreMatrix) {
        let mut w = WeightScheme::default();
        w.dimension_weights.insert("d1".into(), 0.6);
        w.dimension_weights.insert("d2".into(), 0.4);
        w.set_uniform_contexts("d1", &["a".into(), "b".into()]);
        w.set_uniform_contexts("d2", &["a".into()]);
        let mut s = ScoreMatrix::default();
        s.set("a", "d1", 0.5, ScoreProvenance::Evaluator);
        s.set("b", "d1", 0.2, ScoreProvenance::Evaluator);
        s.set("a", "d2", 0.7, ScoreProvenance::Evaluator);
        (w, s)
    }

    fn matched(kind: MatchKind, sim: Option<f64>) -> MatchResult {
        MatchResult {
            kind,
            neighbors: sim
                .map(|s| {
                    vec![Neighbor {
                        entry_id: "e".into(),
                        similarity: s,
                    }]
                })
                .unwrap_or_default(),
            differing_contexts: vec![],
        }
    }

    fn detect_on(
        w: &WeightScheme,
        s: &ScoreMatrix,
        m: &MatchResult,
        conf: &BTreeMap<PairKey, f64>,
        exact: bool,
    ) -> Vec<UncertaintyFlag> {
        let r = evaluate(w, s).unwrap();
        let ctx = vec!["a".to_string(), "b".to_string()];
        detect(
            &DetectInput {
                result: &r,
                scores: s,
                context_ids: &ctx,
                matched: m,
                theta_near: 0.85,
                confidences: conf,
                exact_reuse: exact,
                review_marker: None,
            },
            &HitlConfig::default(),
        )
    }

    #[test]
    fn exact_match_confident_scores_raise_nothing() {
        let (w, s) = small();
        let conf = s.entries.keys().map(|k| (k.clone(), 0.95)).collect();
        assert!(detect_on(&w, &s, &matched(MatchKind::Exact, Some(0.99)), &conf, true).is_empty());
        assert!(detect_on(&w, &s, &matched(MatchKind::Exact, Some(0.99)), &conf, false).is_empty());
    }

    #[test]
    fn conflicting_scores_flagged() {
        let (w, mut s) = small();
        s.set("a", "d1", 0.9, ScoreProvenance::Evaluator);
        s.set("b", "d1", 0.1, ScoreProvenance::Evaluator);
        assert!((0.9f64 - 0.1).abs() >= 0.5);
        let flags = detect_on(&w, &s, &matched(MatchKind::Exact, Some(0.99)), &BTreeMap::new(), false);
        assert!(flags
            .iter()
            .any(|f| f.cause == Cause::ConflictingScores && f.refs == vec!["d1".to_string()]));
    }

    #[test]
    fn sparse_memory_and_low_confidence() {
        let (w, s) = small();
        let conf: BTreeMap<PairKey, f64> = [(PairKey::new("a", "d2"), 0.5)].into();
        let flags = detect_on(&w, &s, &matched(MatchKind::Near, Some(0.87)), &conf, false);
        let causes: Vec<Cause> = flags.iter().map(|f| f.cause).collect();
        assert!(causes.contains(&Cause::SparseMemory));
        assert!(causes.contains(&Cause::LowConfidence));
        let flags = detect_on(&w, &s, &matched(MatchKind::Near, Some(0.95)), &BTreeMap::new(), false);
        assert!(flags.iter().all(|f| f.cause != Cause::SparseMemory));
    }

    #[test]
    fn review_marker_survives_exact_reuse() {
        let (w, s) = small();
        let r = evaluate(&w, &s).unwrap();
        let links = vec!["m1".to_string()];
        let flags = detect(
            &DetectInput {
                result: &r,
                scores: &s,
                context_ids: &[],
                matched: &matched(MatchKind::Exact, Some(1.0)),
                theta_near: 0.85,
                confidences: &BTreeMap::new(),
                exact_reuse: true,
                review_marker: Some(("e", &links)),
            },
            &HitlConfig::default(),
        );
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].cause, Cause::MemoryRequiresHitl);
    }

    #[test]
    fn dedupe_keeps_one_per_component() {
        let f = |cause, sev| UncertaintyFlag::new(Component::PairScore, vec!["a".into(), "d1".into()], cause, sev);
        let out = dedupe_flags(&[f(Cause::LowConfidence, 0.4), f(Cause::HighVariance, 0.6)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].cause, Cause::HighVariance);
    }

    fn session(n: usize) -> HitlSession {
        let flags: Vec<_> = (0..n)
            .map(|i| UncertaintyFlag::new(Component::Dimension, vec![format!("d{i}")], Cause::ConflictingScores, 0.5))
            .collect();
        let texts = (0..n).map(|i| format!("question {i}")).collect();
        HitlSession::new("s1", "t1", "a1", flags, texts, now()).unwrap()
    }

    #[test]
    fn session_store_is_idempotent_per_trace() {
        let store = SessionStore::new();
        let first = store.open(session(2));
        assert_eq!(first.questions.len(), 2);
        let mut other = session(3);
        other.session_id = "s2".into();
        let again = store.open(other);
        assert_eq!(again.session_id, "s1");
        assert_eq!(again.questions.len(), 2);
        assert_eq!(store.list().len(), 1);
    }

    #[test]
    fn override_changes_gamma_by_weight_times_delta() {
        let (w, s) = small();
        let mut inc = IncrementalGamma::new(w.clone(), s.clone()).unwrap();
        let before = inc.gamma();
        inc.override_score("a", "d1", 0.9).unwrap();
        let joint = w.joint_weight("a", "d1");
        assert!((inc.gamma() - before - joint * 0.4).abs() < 1e-12);
        assert!((inc.gamma() - gamma_raw(inc.weights(), inc.scores()).unwrap()).abs() < 1e-12);
        assert_eq!(inc.recomputed_pairs(), 1);
    }

    #[test]
    fn added_context_renormalizes() {
        let (w, s) = small();
        let mut inc = IncrementalGamma::new(w, s).unwrap();
        inc.add_context("c", &[("d1".to_string(), 0.3)].into()).unwrap();
        let sum: f64 = inc.weights().context_weights["d1"].values().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((inc.weights().p("c", "d1").unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let full = evaluate(inc.weights(), inc.scores()).unwrap();
        let r = inc.result();
        assert!((r.gamma - full.gamma).abs() < 1e-12);
        assert!((r.variance - full.variance).abs() < 1e-12);
        assert_eq!(r.dimension_risk, full.dimension_risk);
    }

    #[test]
    fn all_skipped_gives_empty_delta() {
        let (w, s) = small();
        let mut inc = IncrementalGamma::new(w, s).unwrap();
        let mut sess = session(2);
        sess.record_answers(&[], now()).unwrap();
        assert!(sess.questions.iter().all(|q| q.skipped));
        let d = apply_edits(&sess, &mut inc).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.skipped_questions, 2);
        assert_eq!(d.gamma_before, d.gamma_after);
        assert!(matches!(sess.record_answers(&[], now()), Err(AuraError::StaleSession(_))));
    }

    #[test]
    fn answers_must_reference_questions() {
        let mut sess = session(1);
        let a = Answer {
            question_id: "q9".into(),
            ..Default::default()
        };
        assert!(matches!(sess.record_answers(&[a], now()), Err(AuraError::InvalidInput(_))));
        assert!(sess.is_open());
    }

    #[test]
    fn edits_round_trip_json() {
        let e: Edit = serde_json::from_str(
            r#"{"edit":"override_score","context_id":"a","dimension_id":"d1","score":0.9}"#,
        )
        .unwrap();
        assert!(matches!(e, Edit::OverrideScore { score, .. } if score == 0.9));
        assert!(serde_json::from_str::<Edit>(r#"{"edit":"override_score","context_id":"a"}"#).is_err());
    }
}
