//! The assessment engine: memory lookup, context and dimension discovery,
//! pair scoring, profiling, human review, mitigation and persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::a2h::A2hContext;
use crate::clock::{Clock, IdGen, SystemClock};
use crate::config::EngineConfig;
use crate::embed::{Embedder, HashEmbedder};
use crate::error::{AuraError, Result};
use crate::evaluator::{
    declared_contexts, default_context_aliases, question_text, CallCounts, CallMeter, Evaluator, EvaluatorAdapter,
    FixtureTable, StubEvaluator,
};
use crate::hitl::{
    apply_edits, dedupe_flags, detect, Answer, Cause, Component, DetectInput, HitlSession, IncrementalGamma,
    RefinementDelta, SessionStore, UncertaintyFlag,
};
use crate::memory::{
    AuditEvent, EntryPatch, InMemoryStore, InsertOutcome, MatchKind, MatchResult, MemoryBackend, MemoryEntry,
    ReusePlan, StoredAssessment,
};
use crate::mitigation::{
    apply_preference_policy, execute, find_preference, pareto_targets, select, ExecContext, ExecutionReport,
    HookRegistry, Mitigation, MitigationRegistry, PreferenceAdjustment, SelectedMitigation, Selection,
    SelectionInput, SelectionSource,
};
use crate::model::{
    validate_action, ActionRecord, ContextItem, Decision, Derivation, Dimension, PairKey, RiskProfile, ScoreMatrix,
    ScoreProvenance, SchemeKind, Uncertainty, WeightScheme,
};
use crate::profiling::{build_breakdown, interpret_quadrant, label, top_dimensions};
use crate::registry::{allocate_tier_budgets, merge_runtime_dimensions, seed_core_catalogue, DimensionCatalogue};
use crate::scoring::{evaluate, GammaResult};
use crate::trace::{Actor, EventKind, NewEvent, TraceStore};

/// Per-request overrides of the engine configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssessOptions {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auto_save: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verbose: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub think: Option<bool>,
    /// Ignore memory and score every pair.
    pub force_rescore: bool,
    /// Run the selected mitigation chain.
    pub apply: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssessmentStatus {
    Completed,
    PendingHitl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryInfo {
    pub match_kind: MatchKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_id: Option<String>,
    /// `full`, `partial` or `none`.
    pub plan: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rescored_contexts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale_entry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saved_entry_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

/// Result of one assessment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    #[serde(flatten)]
    pub profile: RiskProfile,
    pub status: AssessmentStatus,
    /// Decision after mitigation execution and user preferences.
    pub final_decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hitl_session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<UncertaintyFlag>,
    pub contexts: Vec<ContextItem>,
    pub dimensions: Vec<Dimension>,
    pub memory: MemoryInfo,
    pub evaluator_calls: CallCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preference: Option<PreferenceAdjustment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rationale: Vec<String>,
}

/// Everything needed to refine a parked run once its questions are answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineState {
    pub session_id: String,
    pub trace_id: String,
    pub action: ActionRecord,
    pub contexts: Vec<ContextItem>,
    pub dimensions: Vec<Dimension>,
    pub weights: WeightScheme,
    pub scores: ScoreMatrix,
    pub profile: RiskProfile,
    pub mitigations: Vec<Mitigation>,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_id: Option<String>,
    pub apply: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub assessment: Assessment,
    pub delta: RefinementDelta,
}

pub struct EngineBuilder {
    config: EngineConfig,
    catalogue: Option<DimensionCatalogue>,
    adapter: Option<Arc<dyn EvaluatorAdapter>>,
    embedder: Option<Arc<dyn Embedder>>,
    memory: Option<Arc<dyn MemoryBackend>>,
    mitigations: Option<Arc<MitigationRegistry>>,
    traces: Option<Arc<TraceStore>>,
    sessions: Option<Arc<SessionStore>>,
    pending: Vec<RefineState>,
    hooks: HookRegistry,
    clock: Option<Arc<dyn Clock>>,
    id_counter: u64,
}

impl EngineBuilder {
    pub fn catalogue(mut self, c: DimensionCatalogue) -> Self {
        self.catalogue = Some(c);
        self
    }

    pub fn evaluator(mut self, adapter: Arc<dyn EvaluatorAdapter>) -> Self {
        self.adapter = Some(adapter);
        self
    }

    /// Uses the offline stub with the given fixtures and the config seed.
    pub fn fixtures(mut self, table: FixtureTable) -> Self {
        self.adapter = Some(Arc::new(StubEvaluator::new(self.config.seed, table)));
        self
    }

    pub fn embedder(mut self, e: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(e);
        self
    }

    pub fn memory(mut self, m: Arc<dyn MemoryBackend>) -> Self {
        self.memory = Some(m);
        self
    }

    pub fn mitigations(mut self, r: Arc<MitigationRegistry>) -> Self {
        self.mitigations = Some(r);
        self
    }

    pub fn traces(mut self, t: Arc<TraceStore>) -> Self {
        self.traces = Some(t);
        self
    }

    pub fn sessions(mut self, s: Arc<SessionStore>, pending: Vec<RefineState>) -> Self {
        self.sessions = Some(s);
        self.pending = pending;
        self
    }

    pub fn hooks(mut self, h: HookRegistry) -> Self {
        self.hooks = h;
        self
    }

    pub fn clock(mut self, c: Arc<dyn Clock>) -> Self {
        self.clock = Some(c);
        self
    }

    /// Continues an identifier sequence from an earlier process.
    pub fn id_counter(mut self, n: u64) -> Self {
        self.id_counter = n;
        self
    }

    pub fn build(self) -> Result<Engine> {
        self.config.validate()?;
        let cfg = self.config;
        let embedder = self
            .embedder
            .unwrap_or_else(|| Arc::new(HashEmbedder::new(cfg.memory.embedding_dim)));
        let memory = match self.memory {
            Some(m) => m,
            None => Arc::new(InMemoryStore::new(embedder.dimensionality(), cfg.memory_config())?),
        };
        if memory.dimensionality() != embedder.dimensionality() {
            return Err(AuraError::DimensionalityMismatch {
                expected: memory.dimensionality(),
                got: embedder.dimensionality(),
            });
        }
        let catalogue = self.catalogue.unwrap_or_else(seed_core_catalogue);
        catalogue.validate()?;
        let adapter = self
            .adapter
            .unwrap_or_else(|| Arc::new(StubEvaluator::new(cfg.seed, FixtureTable::default())));
        Ok(Engine {
            evaluator: Evaluator::new(adapter, cfg.budget),
            ids: IdGen::resume(cfg.seed, self.id_counter),
            config: RwLock::new(Arc::new(cfg)),
            catalogue: RwLock::new(Arc::new(catalogue)),
            embedder,
            memory,
            mitigations: self
                .mitigations
                .unwrap_or_else(|| Arc::new(MitigationRegistry::default())),
            traces: self.traces.unwrap_or_default(),
            sessions: self.sessions.unwrap_or_default(),
            pending: Mutex::new(self.pending.into_iter().map(|p| (p.session_id.clone(), p)).collect()),
            hooks: self.hooks,
            clock: self.clock.unwrap_or_else(|| Arc::new(SystemClock)),
        })
    }
}

pub struct Engine {
    config: RwLock<Arc<EngineConfig>>,
    catalogue: RwLock<Arc<DimensionCatalogue>>,
    evaluator: Evaluator,
    embedder: Arc<dyn Embedder>,
    memory: Arc<dyn MemoryBackend>,
    mitigations: Arc<MitigationRegistry>,
    traces: Arc<TraceStore>,
    sessions: Arc<SessionStore>,
    pending: Mutex<BTreeMap<String, RefineState>>,
    hooks: HookRegistry,
    clock: Arc<dyn Clock>,
    ids: IdGen,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("evaluator", &self.evaluator)
            .field("ids", &self.ids)
            .finish_non_exhaustive()
    }
}

/// Scratch state of one run.
struct RunLog {
    trace_id: String,
    now: DateTime<Utc>,
    verbose: bool,
    events: Vec<NewEvent>,
    warnings: Vec<String>,
    flags: Vec<UncertaintyFlag>,
    rationale: Vec<String>,
}

impl RunLog {
    fn event(&mut self, kind: EventKind, actor: Actor, payload: serde_json::Value) {
        self.events
            .push(NewEvent::new(&self.trace_id, kind, actor, self.now, payload));
    }

    fn note(&mut self, what: &str, text: &str) {
        if self.verbose && !text.is_empty() {
            self.rationale.push(format!("{what}: {text}"));
        }
    }

    fn warn(&mut self, msg: String) {
        tracing::warn!(trace = %self.trace_id, "{msg}");
        self.warnings.push(msg);
    }
}

/// Gamma-side outcome of the scoring stage.
struct Scored {
    contexts: Vec<ContextItem>,
    dimensions: Vec<Dimension>,
    weights: WeightScheme,
    scores: ScoreMatrix,
    result: GammaResult,
    confidences: BTreeMap<PairKey, f64>,
}

impl Engine {
    pub fn builder(config: EngineConfig) -> EngineBuilder {
        EngineBuilder {
            config,
            catalogue: None,
            adapter: None,
            embedder: None,
            memory: None,
            mitigations: None,
            traces: None,
            sessions: None,
            pending: Vec::new(),
            hooks: HookRegistry::default(),
            clock: None,
            id_counter: 0,
        }
    }

    pub fn config(&self) -> Arc<EngineConfig> {
        self.config.read().expect("config lock").clone()
    }

    pub fn set_config(&self, next: EngineConfig) -> Result<()> {
        next.validate()?;
        *self.config.write().expect("config lock") = Arc::new(next);
        Ok(())
    }

    /// Applies `f` to a copy of the configuration and installs the result.
    pub fn update_config(&self, f: impl FnOnce(&mut EngineConfig) -> Result<()>) -> Result<Arc<EngineConfig>> {
        let mut guard = self.config.write().expect("config lock");
        let mut next = (**guard).clone();
        f(&mut next)?;
        next.validate()?;
        *guard = Arc::new(next);
        Ok(guard.clone())
    }

    pub fn catalogue(&self) -> Arc<DimensionCatalogue> {
        self.catalogue.read().expect("catalogue lock").clone()
    }

    pub fn set_catalogue(&self, c: DimensionCatalogue) -> Result<()> {
        c.validate()?;
        *self.catalogue.write().expect("catalogue lock") = Arc::new(c);
        Ok(())
    }

    pub fn memory(&self) -> &Arc<dyn MemoryBackend> {
        &self.memory
    }

    pub fn mitigations(&self) -> &Arc<MitigationRegistry> {
        &self.mitigations
    }

    pub fn traces(&self) -> &Arc<TraceStore> {
        &self.traces
    }

    pub fn sessions(&self) -> &Arc<SessionStore> {
        &self.sessions
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn evaluator_name(&self) -> &str {
        self.evaluator.adapter_name()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn next_id(&self, prefix: &str) -> String {
        self.ids.next(prefix)
    }

    pub fn id_counter(&self) -> u64 {
        self.ids.counter()
    }

    pub fn pending_runs(&self) -> Vec<RefineState> {
        self.pending.lock().expect("pending lock").values().cloned().collect()
    }

    /// Operator context for one edit, filed under a fresh trace unless
    /// `trace_id` is given.
    pub fn a2h(&self, trace_id: Option<String>) -> A2hContext<'_> {
        A2hContext {
            memory: self.memory.as_ref(),
            registry: self.mitigations.as_ref(),
            traces: self.traces.as_ref(),
            now: self.clock.now(),
            trace_id: trace_id.unwrap_or_else(|| self.ids.next("a2h")),
        }
    }

    fn evaluator_for(&self, cfg: &EngineConfig, think: bool) -> Evaluator {
        let mut c = cfg.clone();
        c.think = think;
        self.evaluator.with_budget(c.effective_budget())
    }

    /// Nearest entries, classified against the current thresholds.
    pub fn lookup(&self, embedding: &[f64]) -> Result<MatchResult> {
        let cfg = self.config();
        let mut m = self.memory.query(embedding, cfg.memory.k)?;
        m.kind = match m.top_similarity() {
            Some(s) if s >= cfg.memory.theta_exact => MatchKind::Exact,
            Some(s) if s >= cfg.memory.theta_near => MatchKind::Near,
            _ => MatchKind::None,
        };
        Ok(m)
    }

    pub fn assess(&self, action: &ActionRecord, opts: &AssessOptions) -> Result<Assessment> {
        let cfg = self.config();
        let violations = validate_action(action);
        if !violations.is_empty() {
            return Err(AuraError::Validation(violations));
        }
        let trace_id = opts.trace_id.clone().unwrap_or_else(|| self.ids.next("trace"));
        let mut log = RunLog {
            trace_id: trace_id.clone(),
            now: self.clock.now(),
            verbose: opts.verbose.unwrap_or(cfg.verbose),
            events: Vec::new(),
            warnings: Vec::new(),
            flags: Vec::new(),
            rationale: Vec::new(),
        };
        let evaluator = self.evaluator_for(&cfg, opts.think.unwrap_or(cfg.think));
        let meter = CallMeter::new(&evaluator.budget());
        tracing::debug!(trace = %trace_id, action = %action.action_id, "assessment started");

        let embedding = self.embedder.embed(action);
        let matched = if opts.force_rescore {
            MatchResult::none()
        } else {
            self.lookup(&embedding)?
        };
        let best = match matched.neighbors.first() {
            Some(n) if matched.kind != MatchKind::None => self.memory.get(&n.entry_id).ok(),
            _ => None,
        };

        let mut plan = ReusePlan::None { stale_entry: None };
        let mut parsed = None;
        if matched.kind == MatchKind::Exact {
            plan = crate::memory::reuse(&matched, best.as_ref(), &[], log.now);
        }
        if !matches!(plan, ReusePlan::Full { .. }) {
            let contexts = self.discover_contexts(&evaluator, &meter, action, &cfg, &mut log);
            if matched.kind == MatchKind::Near {
                plan = crate::memory::reuse(&matched, best.as_ref(), &contexts, log.now);
            }
            parsed = Some(contexts);
        }
        let mut info = MemoryInfo {
            match_kind: matched.kind,
            similarity: matched.top_similarity(),
            entry_id: None,
            plan: "none".into(),
            rescored_contexts: Vec::new(),
            stale_entry: None,
            saved_entry_id: None,
            duplicate_of: None,
        };
        match &plan {
            ReusePlan::Full { entry_id } => {
                info.plan = "full".into();
                info.entry_id = Some(entry_id.clone());
            }
            ReusePlan::Partial {
                entry_id,
                differing_contexts,
            } => {
                info.plan = "partial".into();
                info.entry_id = Some(entry_id.clone());
                info.rescored_contexts = differing_contexts.clone();
            }
            ReusePlan::None { stale_entry } => {
                if let Some(s) = stale_entry {
                    log.warn(format!("memory entry '{s}' has expired, assessed de novo"));
                }
                info.stale_entry = stale_entry.clone();
            }
        }
        if info.entry_id.is_some() {
            log.event(
                EventKind::MemoryHit,
                Actor::System,
                json!({ "entry_id": info.entry_id, "similarity": info.similarity, "plan": info.plan,
                        "rescored_contexts": info.rescored_contexts }),
            );
        }

        let full_entry = match (&plan, &best) {
            (ReusePlan::Full { .. }, Some(e)) => Some(e.clone()),
            _ => None,
        };
        let (scored, gamma_side, memory_hits) = match &full_entry {
            Some(entry) => {
                let stored = entry.assessment.clone().expect("full reuse needs an assessment");
                let result = evaluate(&stored.weights, &stored.scores)?;
                let hits = stored.mitigations.clone();
                (
                    Scored {
                        contexts: stored.contexts,
                        dimensions: stored.dimensions,
                        weights: stored.weights,
                        scores: stored.scores,
                        result,
                        confidences: BTreeMap::new(),
                    },
                    stored.profile,
                    hits,
                )
            }
            None => {
                let contexts = parsed.unwrap_or_default();
                let (scored, hits) = match (&plan, &best) {
                    (ReusePlan::Partial { differing_contexts, .. }, Some(entry)) => {
                        let stored = entry.assessment.as_ref().expect("partial reuse needs an assessment");
                        let s = self.score_partial(&evaluator, &meter, action, contexts, stored, differing_contexts, &mut log)?;
                        (s, stored.mitigations.clone())
                    }
                    _ => (self.score_de_novo(&evaluator, &meter, action, contexts, &mut log)?, Vec::new()),
                };
                let history: Vec<GammaResult> = matched
                    .neighbors
                    .iter()
                    .filter_map(|n| self.memory.get(&n.entry_id).ok())
                    .map(|e| e.as_gamma_result())
                    .collect();
                let profile = self.gamma_profile(action, &scored, &history, &cfg, &trace_id);
                (scored, profile, hits)
            }
        };

        let low_confidence = log.flags.iter().any(|f| f.cause == Cause::LowConfidence)
            || scored
                .confidences
                .values()
                .any(|c| *c < cfg.hitl.confidence_threshold);
        let (mut profile, selection) = self.policy_side(
            gamma_side,
            &scored.result,
            action,
            &memory_hits,
            low_confidence,
            &cfg,
            &mut |targets| match evaluator.propose_mitigations(&meter, action, targets) {
                Ok(p) => p.items,
                Err(e) => {
                    tracing::warn!(error = %e, "mitigation proposal failed");
                    Vec::new()
                }
            },
        );
        profile.trace_id = trace_id.clone();
        if full_entry.is_none() {
            profile.warnings = log.warnings.clone();
        }
        log.event(
            EventKind::ProfileBuilt,
            Actor::System,
            json!({ "gamma": profile.gamma, "gamma_norm": profile.gamma_norm, "level": profile.level,
                    "variance": profile.uncertainty.variance, "quadrant": profile.quadrant }),
        );
        log.event(
            EventKind::MitigationSelected,
            Actor::System,
            json!({ "selected": selection.selected.iter().map(|s| json!({
                        "mitigation_id": s.mitigation.mitigation_id, "source": s.source })).collect::<Vec<_>>(),
                    "decision": profile.decision, "proposal_targets": selection.proposal_targets }),
        );

        // human review
        let context_ids: Vec<String> = scored.contexts.iter().map(|c| c.context_id.clone()).collect();
        let marker_ids = full_entry.as_ref().map(|e| e.mitigation_ids.clone()).unwrap_or_default();
        let review_marker = full_entry
            .as_ref()
            .filter(|e| e.hitl_required)
            .map(|e| (e.entry_id.as_str(), marker_ids.as_slice()));
        let mut flags = detect(
            &DetectInput {
                result: &scored.result,
                scores: &scored.scores,
                context_ids: &context_ids,
                matched: &matched,
                theta_near: cfg.memory.theta_near,
                confidences: &scored.confidences,
                exact_reuse: full_entry.is_some(),
                review_marker,
            },
            &cfg.hitl,
        );
        flags.extend(log.flags.drain(..));
        if selection.hitl_escalation {
            flags.push(UncertaintyFlag::new(
                Component::Mitigation,
                vec!["escalation".into()],
                Cause::MemoryRequiresHitl,
                1.0,
            ));
        }
        let mut flags = dedupe_flags(&flags);
        let band = label(profile.gamma_norm, &cfg.policy).1;
        let mut pending = cfg.hitl_enabled && !flags.is_empty() && band != Decision::Allow;

        let mut execution = None;
        if !pending && opts.apply {
            let report = self.run_chain(&selection.mitigations(), action, &profile, &cfg, log.now);
            log.event(EventKind::MitigationExecuted, Actor::System, serde_json::to_value(&report)?);
            if report.open_hitl && cfg.hitl_enabled {
                flags.push(UncertaintyFlag::new(
                    Component::Mitigation,
                    selection.ids(),
                    Cause::MemoryRequiresHitl,
                    1.0,
                ));
                pending = true;
            }
            execution = Some(report);
        }

        let pref = find_preference(&cfg.preferences, action)
            .map(|r| apply_preference_policy(action, Some(r), band, log.now, cfg.approvals_required));
        let mut final_decision = execution
            .as_ref()
            .map(|r| r.final_decision)
            .unwrap_or(profile.decision);
        if let Some(forced) = pref.as_ref().and_then(|p| p.forced) {
            final_decision = final_decision.max(forced);
        }

        let mut session_id = None;
        if pending {
            let texts = evaluator
                .generate_questions(&meter, &flags)
                .unwrap_or_else(|_| flags.iter().map(question_text).collect());
            let session = HitlSession::new(
                &self.ids.next("hitl"),
                &trace_id,
                &action.action_id,
                flags.clone(),
                texts,
                log.now,
            )?;
            let session = self.sessions.open(session);
            log.event(
                EventKind::HitlOpened,
                Actor::System,
                json!({ "session_id": session.session_id, "flags": session.flags,
                        "questions": session.questions.iter().map(|q| &q.text).collect::<Vec<_>>() }),
            );
            session_id = Some(session.session_id);
        }

        let auto_save = opts.auto_save.unwrap_or(cfg.auto_save);
        let counts = meter.counts();
        self.traces.append(std::mem::take(&mut log.events))?;
        if auto_save && full_entry.is_none() {
            let mut entry = MemoryEntry::new(
                &self.ids.next("mem"),
                embedding.clone(),
                action.clone(),
                &scored.result,
                log.now,
            );
            entry.mitigation_ids = selection.ids();
            entry.trigger_conditions = selection
                .selected
                .iter()
                .map(|s| s.mitigation.trigger.clone())
                .collect();
            entry.assessment = Some(StoredAssessment {
                contexts: scored.contexts.clone(),
                dimensions: scored.dimensions.clone(),
                weights: scored.weights.clone(),
                scores: scored.scores.clone(),
                profile: profile.clone(),
                mitigations: selection.mitigations(),
            });
            entry.audit.push(AuditEvent {
                at: log.now,
                actor: Actor::System.to_string(),
                kind: "created".into(),
                detail: json!({ "trace_id": trace_id }),
            });
            let (outcome, _) = self.traces.commit(|| {
                let outcome = self.memory.insert(entry)?;
                let ev = NewEvent::new(
                    &trace_id,
                    EventKind::MemoryInsert,
                    Actor::System,
                    log.now,
                    serde_json::to_value(&outcome)?,
                );
                Ok((outcome, vec![ev]))
            })?;
            match outcome {
                InsertOutcome::Accepted { entry_id } => info.saved_entry_id = Some(entry_id),
                InsertOutcome::Rejected { duplicate_of, .. } => info.duplicate_of = Some(duplicate_of),
            }
        }

        if let Some(sid) = &session_id {
            let state = RefineState {
                session_id: sid.clone(),
                trace_id: trace_id.clone(),
                action: action.clone(),
                contexts: scored.contexts.clone(),
                dimensions: scored.dimensions.clone(),
                weights: scored.weights.clone(),
                scores: scored.scores.clone(),
                profile: profile.clone(),
                mitigations: selection.mitigations(),
                embedding,
                entry_id: info.saved_entry_id.clone().or_else(|| info.entry_id.clone()),
                apply: opts.apply,
            };
            self.pending.lock().expect("pending lock").insert(sid.clone(), state);
        }

        let status = if pending {
            AssessmentStatus::PendingHitl
        } else {
            AssessmentStatus::Completed
        };
        self.traces.record(
            &trace_id,
            EventKind::RunCompleted,
            Actor::System,
            log.now,
            json!({ "status": status, "decision": profile.decision, "final_decision": final_decision,
                    "gamma_norm": profile.gamma_norm, "evaluator_calls": counts }),
        )?;
        tracing::info!(trace = %trace_id, gamma_norm = profile.gamma_norm, decision = %profile.decision.as_str(),
            calls = counts.total, "assessment finished");
        Ok(Assessment {
            profile,
            status,
            final_decision,
            hitl_session_id: session_id,
            flags,
            contexts: scored.contexts,
            dimensions: scored.dimensions,
            memory: info,
            evaluator_calls: counts,
            execution,
            preference: pref,
            rationale: log.rationale,
        })
    }

    fn discover_contexts(
        &self,
        evaluator: &Evaluator,
        meter: &CallMeter,
        action: &ActionRecord,
        cfg: &EngineConfig,
        log: &mut RunLog,
    ) -> Vec<ContextItem> {
        match evaluator.parse_context(meter, action) {
            Ok(p) if !p.items.is_empty() => {
                log.note("contexts", &p.rationale);
                if p.confidence < cfg.hitl.confidence_threshold {
                    log.flags.push(UncertaintyFlag::new(
                        Component::Context,
                        p.items.iter().map(|c| c.context_id.clone()).collect(),
                        Cause::LowConfidence,
                        1.0 - p.confidence,
                    ));
                }
                log.event(
                    EventKind::ContextParsed,
                    Actor::Evaluator,
                    json!({ "contexts": p.items, "confidence": p.confidence }),
                );
                p.items
            }
            other => {
                let reason = match other {
                    Err(e) => e.to_string(),
                    Ok(_) => "evaluator returned no contexts".into(),
                };
                log.warn(format!("context parsing failed, using declared facts: {reason}"));
                let declared = declared_contexts(action, &default_context_aliases());
                log.flags.push(UncertaintyFlag::new(
                    Component::Context,
                    declared.iter().map(|c| c.context_id.clone()).collect(),
                    Cause::LowConfidence,
                    1.0,
                ));
                log.event(
                    EventKind::ContextParsed,
                    Actor::System,
                    json!({ "contexts": declared, "fallback": reason }),
                );
                declared
            }
        }
    }

    fn score_de_novo(
        &self,
        evaluator: &Evaluator,
        meter: &CallMeter,
        action: &ActionRecord,
        contexts: Vec<ContextItem>,
        log: &mut RunLog,
    ) -> Result<Scored> {
        let catalogue = self.catalogue();
        let proposals = match evaluator.propose_dimensions(meter, action, &contexts) {
            Ok(p) => {
                log.note("dimensions", &p.rationale);
                p.items
            }
            Err(e) => {
                log.warn(format!("dimension proposal failed, core set only: {e}"));
                Vec::new()
            }
        };
        let dimensions = merge_runtime_dimensions(&catalogue, &proposals);
        let mut weights = WeightScheme {
            dimension_weights: allocate_tier_budgets(&catalogue, &dimensions, 1.0)?,
            context_weights: BTreeMap::new(),
            scheme_kind: SchemeKind::Custom,
        };
        let ids: Vec<String> = contexts.iter().map(|c| c.context_id.clone()).collect();
        for d in &dimensions {
            weights.set_uniform_contexts(&d.dimension_id, &ids);
        }
        log.event(
            EventKind::DimensionsSet,
            Actor::System,
            json!({ "dimensions": dimensions, "weights": weights }),
        );
        let todo = weights.pairs();
        self.score_pairs(evaluator, meter, action, contexts, dimensions, weights, ScoreMatrix::default(), todo, log)
    }

    #[allow(clippy::too_many_arguments)]
    fn score_partial(
        &self,
        evaluator: &Evaluator,
        meter: &CallMeter,
        action: &ActionRecord,
        contexts: Vec<ContextItem>,
        stored: &StoredAssessment,
        differing: &[String],
        log: &mut RunLog,
    ) -> Result<Scored> {
        let dimensions = stored.dimensions.clone();
        let mut weights = stored.weights.clone();
        let ids: Vec<String> = contexts.iter().map(|c| c.context_id.clone()).collect();
        let current: BTreeSet<&String> = ids.iter().collect();
        for d in &dimensions {
            let same = weights
                .context_weights
                .get(&d.dimension_id)
                .is_some_and(|m| m.keys().collect::<BTreeSet<_>>() == current);
            if !same {
                weights.set_uniform_contexts(&d.dimension_id, &ids);
            }
        }
        log.event(
            EventKind::DimensionsSet,
            Actor::System,
            json!({ "dimensions": dimensions, "weights": weights, "reused_from": "memory" }),
        );
        let differing: BTreeSet<&str> = differing.iter().map(String::as_str).collect();
        let mut scores = ScoreMatrix::default();
        let mut todo = Vec::new();
        for k in weights.pairs() {
            match stored.scores.get(&k.context_id, &k.dimension_id) {
                Some(s) if !differing.contains(k.context_id.as_str()) => {
                    scores.set(&k.context_id, &k.dimension_id, s, ScoreProvenance::Memory);
                    log.event(
                        EventKind::PairScored,
                        Actor::System,
                        json!({ "context_id": k.context_id, "dimension_id": k.dimension_id, "score": s,
                                "provenance": ScoreProvenance::Memory }),
                    );
                }
                _ => todo.push(k),
            }
        }
        self.score_pairs(evaluator, meter, action, contexts, dimensions, weights, scores, todo, log)
    }

    #[allow(clippy::too_many_arguments)]
    fn score_pairs(
        &self,
        evaluator: &Evaluator,
        meter: &CallMeter,
        action: &ActionRecord,
        contexts: Vec<ContextItem>,
        dimensions: Vec<Dimension>,
        weights: WeightScheme,
        mut scores: ScoreMatrix,
        todo: Vec<PairKey>,
        log: &mut RunLog,
    ) -> Result<Scored> {
        let ctx: BTreeMap<&str, &ContextItem> = contexts.iter().map(|c| (c.context_id.as_str(), c)).collect();
        let dims: BTreeMap<&str, &Dimension> = dimensions.iter().map(|d| (d.dimension_id.as_str(), d)).collect();
        let outcomes: Vec<_> = todo
            .par_iter()
            .map(|k| {
                let c = ctx[k.context_id.as_str()];
                let d = dims[k.dimension_id.as_str()];
                evaluator.score_pair(meter, action, c, d)
            })
            .collect();
        let mut confidences = BTreeMap::new();
        for (k, outcome) in todo.into_iter().zip(outcomes) {
            match outcome {
                Ok(o) => {
                    scores.set(&k.context_id, &k.dimension_id, o.score, ScoreProvenance::Evaluator);
                    log.note(&format!("{}/{}", k.context_id, k.dimension_id), &o.rationale);
                    log.event(
                        EventKind::PairScored,
                        Actor::Evaluator,
                        json!({ "context_id": k.context_id, "dimension_id": k.dimension_id, "score": o.score,
                                "confidence": o.confidence, "provenance": ScoreProvenance::Evaluator }),
                    );
                    confidences.insert(k, o.confidence);
                }
                Err(e) => {
                    log.warn(format!("scoring {}/{} failed: {e}", k.context_id, k.dimension_id));
                    log.flags.push(UncertaintyFlag::new(
                        Component::PairScore,
                        vec![k.context_id.clone(), k.dimension_id.clone()],
                        Cause::LowConfidence,
                        1.0,
                    ));
                }
            }
        }
        let result = evaluate(&weights, &scores)?;
        Ok(Scored {
            contexts,
            dimensions,
            weights,
            scores,
            result,
            confidences,
        })
    }

    /// Gamma-side profile fields. Label, decision and mitigations are filled
    /// by [`Engine::policy_side`].
    fn gamma_profile(
        &self,
        action: &ActionRecord,
        s: &Scored,
        history: &[GammaResult],
        cfg: &EngineConfig,
        trace_id: &str,
    ) -> RiskProfile {
        let r = &s.result;
        RiskProfile {
            action_id: action.action_id.clone(),
            gamma: r.gamma,
            u_total: r.u_total,
            gamma_norm: r.gamma_norm,
            uncertainty: Uncertainty {
                variance: r.variance,
                concentration: r.concentration,
            },
            level: String::new(),
            decision: Decision::Allow,
            quadrant: interpret_quadrant(
                r.gamma_norm,
                r.variance,
                cfg.policy.quadrant_threshold(),
                cfg.hitl.variance_threshold,
            ),
            top_dimensions: top_dimensions(r, &s.dimensions, cfg.top_n),
            breakdown: build_breakdown(r, history),
            mitigation_id: None,
            mitigation_ids: Vec::new(),
            mitigation_steps: Vec::new(),
            warnings: Vec::new(),
            trace_id: trace_id.to_string(),
            version: 1,
        }
    }

    /// Label, band decision and mitigation selection under the current
    /// policy and registry.
    #[allow(clippy::too_many_arguments)]
    fn policy_side(
        &self,
        mut profile: RiskProfile,
        result: &GammaResult,
        action: &ActionRecord,
        memory_hits: &[Mitigation],
        low_confidence: bool,
        cfg: &EngineConfig,
        propose: &mut dyn FnMut(&[PairKey]) -> Vec<Mitigation>,
    ) -> (RiskProfile, Selection) {
        let (level, band) = label(profile.gamma_norm, &cfg.policy);
        profile.level = level;
        profile.decision = band;
        let registry = self.mitigations.snapshot();
        let targets = pareto_targets(result, cfg.pareto_share);
        let selection = select(
            &SelectionInput {
                profile: &profile,
                action,
                policy: &cfg.policy,
                registry: &registry,
                memory_hits,
                targets: &targets,
                low_confidence,
            },
            propose,
        );
        apply_selection(&mut profile, &selection, band);
        (profile, selection)
    }

    fn run_chain(
        &self,
        mitigations: &[Mitigation],
        action: &ActionRecord,
        profile: &RiskProfile,
        cfg: &EngineConfig,
        now: DateTime<Utc>,
    ) -> ExecutionReport {
        execute(
            mitigations,
            action,
            profile,
            &ExecContext {
                policy: &cfg.policy,
                now,
                hooks: &self.hooks,
                roles: &cfg.roles,
                preferences: &cfg.preferences,
                approvals_required: cfg.approvals_required,
            },
        )
    }

    /// Runs the mitigation chain of an existing profile on demand.
    pub fn run_mitigations(
        &self,
        mitigations: &[Mitigation],
        action: &ActionRecord,
        profile: &RiskProfile,
    ) -> ExecutionReport {
        let cfg = self.config();
        let report = self.run_chain(mitigations, action, profile, &cfg, self.clock.now());
        if let Err(e) = self.traces.record(
            &profile.trace_id,
            EventKind::MitigationExecuted,
            Actor::System,
            self.clock.now(),
            serde_json::to_value(&report).unwrap_or_default(),
        ) {
            tracing::warn!(error = %e, "could not record mitigation run");
        }
        report
    }

    /// Applies the answers of a parked session and re-derives the profile
    /// incrementally. The version is bumped and the memory entry updated.
    pub fn answer(&self, session_id: &str, answers: &[Answer], actor: &Actor) -> Result<Refinement> {
        if !actor.is_human() {
            return Err(AuraError::Precondition(format!("answers need a human actor, got {actor}")));
        }
        let cfg = self.config();
        let now = self.clock.now();
        let session = self.sessions.get(session_id)?;
        if !session.is_open() {
            return Err(AuraError::StaleSession(session_id.to_string()));
        }
        let state = self
            .pending
            .lock()
            .expect("pending lock")
            .get(session_id)
            .cloned()
            .ok_or_else(|| AuraError::not_found("pending run", session_id))?;
        self.sessions.update(session_id, |s| s.record_answers(answers, now))?;
        let session = self.sessions.get(session_id)?;

        let mut inc = IncrementalGamma::new(state.weights.clone(), state.scores.clone())?;
        let delta = apply_edits(&session, &mut inc)?;
        let result = inc.result();
        let mut contexts = state.contexts.clone();
        for (id, label) in &delta.added_contexts {
            contexts.push(ContextItem::new(id, label, Derivation::HitlAdded));
        }
        let mut dimensions = state.dimensions.clone();
        for (id, label, tier) in &delta.added_dimensions {
            dimensions.push(Dimension::new(id, label, *tier));
        }
        let mut scores = inc.scores().clone();
        for k in &delta.changed_pairs {
            if let Some(e) = scores.entries.get_mut(k) {
                if state.scores.entries.get(k) != Some(e) {
                    e.provenance = ScoreProvenance::Hitl;
                }
            }
        }
        let scored = Scored {
            contexts,
            dimensions,
            weights: inc.weights().clone(),
            scores,
            result,
            confidences: BTreeMap::new(),
        };

        let rejected: BTreeSet<&str> = delta.rejected_mitigations.iter().map(String::as_str).collect();
        let kept: Vec<Mitigation> = state
            .mitigations
            .iter()
            .filter(|m| !rejected.contains(m.mitigation_id.as_str()))
            .cloned()
            .collect();
        let mut draft = self.gamma_profile(&state.action, &scored, &[], &cfg, &state.trace_id);
        draft.version = state.profile.version + 1;
        let (mut profile, mut selection) = {
            let (level, band) = label(draft.gamma_norm, &cfg.policy);
            draft.level = level;
            draft.decision = band;
            let registry: Vec<Mitigation> = self
                .mitigations
                .snapshot()
                .iter()
                .filter(|m| !rejected.contains(m.mitigation_id.as_str()))
                .cloned()
                .collect();
            let sel = select(
                &SelectionInput {
                    profile: &draft,
                    action: &state.action,
                    policy: &cfg.policy,
                    registry: &registry,
                    memory_hits: &kept,
                    targets: &[],
                    low_confidence: false,
                },
                &mut |_| Vec::new(),
            );
            (draft, sel)
        };
        let mut warnings = Vec::new();
        for id in &delta.accepted_mitigations {
            if selection.ids().contains(id) {
                continue;
            }
            let found = self
                .mitigations
                .get(id)
                .or_else(|| state.mitigations.iter().find(|m| &m.mitigation_id == id).cloned());
            match found {
                Some(m) => selection.selected.push(SelectedMitigation {
                    mitigation: m,
                    source: SelectionSource::Memory,
                }),
                None => warnings.push(format!("accepted mitigation '{id}' is not registered, skipped")),
            }
        }
        let band = profile.decision;
        apply_selection(&mut profile, &selection, band);
        profile.warnings = warnings;

        let mut execution = None;
        if state.apply {
            execution = Some(self.run_chain(&selection.mitigations(), &state.action, &profile, &cfg, now));
        }
        let pref = find_preference(&cfg.preferences, &state.action)
            .map(|r| apply_preference_policy(&state.action, Some(r), band, now, cfg.approvals_required));
        let mut final_decision = execution
            .as_ref()
            .map(|r| r.final_decision)
            .unwrap_or(profile.decision);
        if let Some(forced) = pref.as_ref().and_then(|p| p.forced) {
            final_decision = final_decision.max(forced);
        }

        self.traces.record(
            &state.trace_id,
            EventKind::HitlApplied,
            actor.clone(),
            now,
            json!({ "session_id": session_id, "delta": delta }),
        )?;
        let stored = StoredAssessment {
            contexts: scored.contexts.clone(),
            dimensions: scored.dimensions.clone(),
            weights: scored.weights.clone(),
            scores: scored.scores.clone(),
            profile: profile.clone(),
            mitigations: selection.mitigations(),
        };
        let mut info = MemoryInfo {
            match_kind: MatchKind::None,
            similarity: None,
            entry_id: state.entry_id.clone(),
            plan: "none".into(),
            rescored_contexts: Vec::new(),
            stale_entry: None,
            saved_entry_id: None,
            duplicate_of: None,
        };
        let template = MemoryEntry::new("refine", state.embedding.clone(), state.action.clone(), &scored.result, now);
        let existing = state.entry_id.as_ref().filter(|id| self.memory.get(id).is_ok());
        if let Some(entry_id) = existing {
            let patch = EntryPatch {
                global_gamma: Some(template.global_gamma.clone()),
                local_gammas: Some(template.local_gammas.clone()),
                mitigation_ids: Some(selection.ids()),
                assessment: Some(stored),
                ..Default::default()
            };
            let audit = AuditEvent {
                at: now,
                actor: actor.to_string(),
                kind: "hitl_refined".into(),
                detail: json!({ "session_id": session_id }),
            };
            self.traces.commit(|| {
                self.memory.update(entry_id, &patch, audit)?;
                let ev = NewEvent::new(
                    &state.trace_id,
                    EventKind::MemoryInsert,
                    actor.clone(),
                    now,
                    json!({ "op": "refine", "entry_id": entry_id, "version": profile.version }),
                );
                Ok(((), vec![ev]))
            })?;
            info.saved_entry_id = Some(entry_id.clone());
        } else if cfg.auto_save {
            let mut entry = template;
            entry.entry_id = self.ids.next("mem");
            entry.mitigation_ids = selection.ids();
            entry.assessment = Some(stored);
            let (outcome, _) = self.traces.commit(|| {
                let outcome = self.memory.insert(entry)?;
                let ev = NewEvent::new(
                    &state.trace_id,
                    EventKind::MemoryInsert,
                    actor.clone(),
                    now,
                    serde_json::to_value(&outcome)?,
                );
                Ok((outcome, vec![ev]))
            })?;
            match outcome {
                InsertOutcome::Accepted { entry_id } => info.saved_entry_id = Some(entry_id),
                InsertOutcome::Rejected { duplicate_of, .. } => info.duplicate_of = Some(duplicate_of),
            }
        }
        self.pending.lock().expect("pending lock").remove(session_id);
        self.traces.record(
            &state.trace_id,
            EventKind::RunCompleted,
            Actor::System,
            now,
            json!({ "status": AssessmentStatus::Completed, "decision": profile.decision,
                    "final_decision": final_decision, "gamma_norm": profile.gamma_norm,
                    "version": profile.version }),
        )?;
        Ok(Refinement {
            assessment: Assessment {
                profile,
                status: AssessmentStatus::Completed,
                final_decision,
                hitl_session_id: Some(session_id.to_string()),
                flags: Vec::new(),
                contexts: scored.contexts,
                dimensions: scored.dimensions,
                memory: info,
                evaluator_calls: CallCounts::default(),
                execution,
                preference: pref,
                rationale: Vec::new(),
            },
            delta,
        })
    }

    /// Closes a parked session without changes.
    pub fn abandon(&self, session_id: &str, actor: &Actor) -> Result<HitlSession> {
        let now = self.clock.now();
        self.sessions.update(session_id, |s| s.abandon(now))?;
        let session = self.sessions.get(session_id)?;
        self.pending.lock().expect("pending lock").remove(session_id);
        self.traces.record(
            &session.trace_id,
            EventKind::HitlApplied,
            actor.clone(),
            now,
            json!({ "session_id": session_id, "abandoned": true }),
        )?;
        Ok(session)
    }
}

/// Fills the mitigation fields and the planned decision: the band decision,
/// upgraded from warn to rewrite when a selected mitigation can rewrite.
fn apply_selection(profile: &mut RiskProfile, selection: &Selection, band: Decision) {
    profile.decision = if band == Decision::Warn && selection.rewrite_capable() {
        Decision::Rewrite
    } else {
        band
    };
    profile.mitigation_ids = selection.ids();
    profile.mitigation_id = profile.mitigation_ids.first().cloned();
    let mut steps: Vec<String> = Vec::new();
    for m in &selection.selected {
        for s in &m.mitigation.steps {
            if !steps.contains(s) {
                steps.push(s.clone());
            }
        }
    }
    profile.mitigation_steps = steps;
}
