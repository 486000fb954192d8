//! Embedding-backed memory: duplicate rejection, similarity search, reuse
//! planning, bulk edits with tombstones, and lossless export/import.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{AuraError, Result};
use crate::model::{ActionRecord, ContextItem, Dimension, RiskProfile, ScoreMatrix, WeightScheme};
use crate::scoring::GammaResult;
use crate::trigger::TriggerExpr;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub theta_exact: f64,
    pub theta_near: f64,
    pub theta_dup: f64,
    pub k: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            theta_exact: 0.98,
            theta_near: 0.85,
            theta_dup: 0.95,
            k: 3,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(in_unit(self.theta_exact) && in_unit(self.theta_near) && in_unit(self.theta_dup)) {
            return Err(AuraError::Config("similarity thresholds must lie in [0,1]".into()));
        }
        if self.theta_dup < self.theta_near || self.theta_exact < self.theta_near {
            return Err(AuraError::Config(
                "thresholds must satisfy theta_dup >= theta_near and theta_exact >= theta_near".into(),
            ));
        }
        if self.k == 0 {
            return Err(AuraError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GammaSummary {
    pub gamma: f64,
    pub u_total: f64,
    pub gamma_norm: f64,
    pub variance: f64,
    pub concentration: f64,
}

impl From<&GammaResult> for GammaSummary {
    fn from(r: &GammaResult) -> Self {
        GammaSummary {
            gamma: r.gamma,
            u_total: r.u_total,
            gamma_norm: r.gamma_norm,
            variance: r.variance,
            concentration: r.concentration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGamma {
    pub context_id: String,
    pub dimension_id: String,
    pub contribution: f64,
}

/// Everything needed to replay or partially reuse an assessment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAssessment {
    pub contexts: Vec<ContextItem>,
    pub dimensions: Vec<Dimension>,
    pub weights: WeightScheme,
    pub scores: ScoreMatrix,
    pub profile: RiskProfile,
    /// Mitigations selected for the run, including model proposals that
    /// never entered the registry.
    #[serde(default)]
    pub mitigations: Vec<crate::mitigation::Mitigation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub at: DateTime<Utc>,
    pub actor: String,
    pub kind: String,
    #[serde(default)]
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: String,
    pub action_embedding: Vec<f64>,
    pub action_snapshot: ActionRecord,
    pub global_gamma: GammaSummary,
    pub local_gammas: Vec<LocalGamma>,
    #[serde(default)]
    pub mitigation_ids: Vec<String>,
    #[serde(default)]
    pub trigger_conditions: Vec<TriggerExpr>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    /// Any reuse of this entry must go through a human.
    #[serde(default)]
    pub hitl_required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessment: Option<StoredAssessment>,
    #[serde(default)]
    pub audit: Vec<AuditEvent>,
}

impl MemoryEntry {
    pub fn new(
        entry_id: &str,
        embedding: Vec<f64>,
        action: ActionRecord,
        result: &GammaResult,
        created_at: DateTime<Utc>,
    ) -> Self {
        MemoryEntry {
            entry_id: entry_id.to_string(),
            action_embedding: embedding,
            action_snapshot: action,
            global_gamma: GammaSummary::from(result),
            local_gammas: result
                .pair_contributions
                .iter()
                .map(|p| LocalGamma {
                    context_id: p.context_id.clone(),
                    dimension_id: p.dimension_id.clone(),
                    contribution: p.contribution,
                })
                .collect(),
            mitigation_ids: Vec::new(),
            trigger_conditions: Vec::new(),
            created_at,
            ttl: None,
            status: None,
            notes: None,
            hitl_required: false,
            assessment: None,
            audit: Vec::new(),
        }
    }

    pub fn validate(&self, dimensionality: usize) -> Result<()> {
        let mut v = Vec::new();
        if self.entry_id.trim().is_empty() {
            v.push(crate::model::Violation::new("entry_id", "non-empty", "entry_id is empty"));
        }
        if self.action_embedding.len() != dimensionality {
            return Err(AuraError::DimensionalityMismatch {
                expected: dimensionality,
                got: self.action_embedding.len(),
            });
        }
        let norm = self.action_embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            v.push(crate::model::Violation::new(
                "action_embedding",
                "L2 norm = 1",
                format!("embedding norm {norm}"),
            ));
        }
        let local: f64 = self.local_gammas.iter().map(|l| l.contribution).sum();
        if (local - self.global_gamma.gamma).abs() > 1e-9 {
            v.push(crate::model::Violation::new(
                "local_gammas",
                "sum local = global gamma",
                format!("local sum {local} != global {}", self.global_gamma.gamma),
            ));
        }
        if let Some(ttl) = self.ttl {
            if ttl <= self.created_at {
                v.push(crate::model::Violation::new("ttl", "ttl > created_at", "ttl precedes creation"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(AuraError::Validation(v))
        }
    }

    pub fn is_expired(&self, now: DateTime<Utc>) -> bool {
        self.ttl.is_some_and(|t| t <= now)
    }

    /// Past result rebuilt from the stored local contributions.
    pub fn as_gamma_result(&self) -> GammaResult {
        let g = &self.global_gamma;
        GammaResult {
            gamma: g.gamma,
            u_total: g.u_total,
            gamma_norm: g.gamma_norm,
            mean_weighted_score: if g.u_total > 0.0 { g.gamma / g.u_total } else { 0.0 },
            variance: g.variance,
            concentration: g.concentration,
            pair_contributions: self
                .local_gammas
                .iter()
                .map(|l| crate::scoring::PairContribution {
                    context_id: l.context_id.clone(),
                    dimension_id: l.dimension_id.clone(),
                    weight: 0.0,
                    score: 0.0,
                    contribution: l.contribution,
                })
                .collect(),
            dimension_risk: BTreeMap::new(),
            degenerate: g.u_total <= 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Near,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub entry_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub kind: MatchKind,
    pub neighbors: Vec<Neighbor>,
    #[serde(default)]
    pub differing_contexts: Vec<String>,
}

impl MatchResult {
    pub fn none() -> Self {
        MatchResult {
            kind: MatchKind::None,
            neighbors: Vec::new(),
            differing_contexts: Vec::new(),
        }
    }

    pub fn top_similarity(&self) -> Option<f64> {
        self.neighbors.first().map(|n| n.similarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "lowercase")]
pub enum ReusePlan {
    Full {
        entry_id: String,
    },
    Partial {
        entry_id: String,
        differing_contexts: Vec<String>,
    },
    None {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stale_entry: Option<String>,
    },
}

/// Context ids present in only one of the two sets, or carrying a
/// different label.
pub fn differing_contexts(stored: &[ContextItem], current: &[ContextItem]) -> Vec<String> {
    let a: BTreeMap<&str, &str> = stored.iter().map(|c| (c.context_id.as_str(), c.label.as_str())).collect();
    let b: BTreeMap<&str, &str> = current.iter().map(|c| (c.context_id.as_str(), c.label.as_str())).collect();
    let keys: BTreeSet<&str> = a.keys().chain(b.keys()).copied().collect();
    keys.into_iter()
        .filter(|k| a.get(k) != b.get(k))
        .map(str::to_string)
        .collect()
}

/// Turns a match into a reuse plan. An expired best entry counts as no
/// match and is reported as stale.
pub fn reuse(
    m: &MatchResult,
    best: Option<&MemoryEntry>,
    current_contexts: &[ContextItem],
    now: DateTime<Utc>,
) -> ReusePlan {
    let none = ReusePlan::None { stale_entry: None };
    let Some(entry) = best else {
        return none;
    };
    if m.kind == MatchKind::None || m.neighbors.first().map(|n| &n.entry_id) != Some(&entry.entry_id) {
        return none;
    }
    if entry.is_expired(now) {
        return ReusePlan::None {
            stale_entry: Some(entry.entry_id.clone()),
        };
    }
    let Some(stored) = &entry.assessment else {
        return none;
    };
    match m.kind {
        MatchKind::Exact => ReusePlan::Full {
            entry_id: entry.entry_id.clone(),
        },
        MatchKind::Near => ReusePlan::Partial {
            entry_id: entry.entry_id.clone(),
            differing_contexts: differing_contexts(&stored.contexts, current_contexts),
        },
        MatchKind::None => none,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum InsertOutcome {
    Accepted { entry_id: String },
    Rejected { duplicate_of: String, similarity: f64 },
}

/// Conjunction of attribute tests. An empty selector matches every entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    /// Matches entries whose ttl has (true) or has not (false) passed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl_expired: Option<bool>,
}

impl Selector {
    pub fn expired() -> Self {
        Selector {
            ttl_expired: Some(true),
            ..Default::default()
        }
    }

    pub fn matches(&self, e: &MemoryEntry, now: DateTime<Utc>) -> bool {
        let a = &e.action_snapshot;
        self.ids.as_ref().is_none_or(|ids| ids.contains(&e.entry_id))
            && self.action.as_ref().is_none_or(|x| &a.action == x)
            && self.intent.as_ref().is_none_or(|x| &a.intent == x)
            && self.actor.as_ref().is_none_or(|x| &a.actor == x)
            && self.status.as_ref().is_none_or(|x| e.status.as_ref() == Some(x))
            && self.ttl_expired.is_none_or(|want| e.is_expired(now) == want)
    }
}

/// Field edits for an existing entry. Every edit is re-validated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl: Option<DateTime<Utc>>,
    #[serde(default)]
    pub clear_ttl: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hitl_required: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mitigation_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub link_mitigations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_gamma: Option<GammaSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_gammas: Option<Vec<LocalGamma>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_snapshot: Option<ActionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessment: Option<StoredAssessment>,
}

impl EntryPatch {
    pub fn is_empty(&self) -> bool {
        self == &EntryPatch::default()
    }

    fn apply(&self, e: &mut MemoryEntry) {
        if let Some(s) = &self.status {
            e.status = Some(s.clone());
        }
        if let Some(n) = &self.notes {
            e.notes = Some(n.clone());
        }
        if self.clear_ttl {
            e.ttl = None;
        }
        if let Some(t) = self.ttl {
            e.ttl = Some(t);
        }
        if let Some(h) = self.hitl_required {
            e.hitl_required = h;
        }
        if let Some(ids) = &self.mitigation_ids {
            e.mitigation_ids = ids.clone();
        }
        for id in &self.link_mitigations {
            if !e.mitigation_ids.contains(id) {
                e.mitigation_ids.push(id.clone());
            }
        }
        if let Some(g) = self.global_gamma {
            e.global_gamma = g;
        }
        if let Some(l) = &self.local_gammas {
            e.local_gammas = l.clone();
        }
        if let Some(a) = &self.action_snapshot {
            e.action_snapshot = a.clone();
        }
        if let Some(v) = &self.action_embedding {
            e.action_embedding = v.clone();
        }
        if let Some(a) = &self.assessment {
            e.assessment = Some(a.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum BulkOp {
    Add { entries: Vec<MemoryEntry> },
    Update { selector: Selector, patch: EntryPatch },
    Delete { selector: Selector },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryStats {
    pub count: usize,
    pub deleted: usize,
    pub dimensionality: usize,
    pub mitigation_links: usize,
    pub with_ttl: usize,
    pub hitl_required: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryExport {
    pub format_version: u32,
    pub dimensionality: usize,
    pub entries: Vec<MemoryEntry>,
    pub deleted: Vec<MemoryEntry>,
    pub stats: MemoryStats,
}

impl MemoryExport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Body of `POST /memory/query` on the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub embedding: Vec<f64>,
    pub k: usize,
}

/// Body of `GET /memory/info` on the service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreInfo {
    pub dimensionality: usize,
    pub config: MemoryConfig,
}

/// Storage interface shared by the in-process store and remote clients.
pub trait MemoryBackend: Send + Sync {
    fn dimensionality(&self) -> usize;
    fn config(&self) -> MemoryConfig;
    fn query(&self, embedding: &[f64], k: usize) -> Result<MatchResult>;
    fn get(&self, entry_id: &str) -> Result<MemoryEntry>;
    /// Rejects near-duplicates at or above `theta_dup`.
    fn insert(&self, entry: MemoryEntry) -> Result<InsertOutcome>;
    /// Inserts without the duplicate check, replacing any entry with the
    /// same id.
    fn upsert(&self, entry: MemoryEntry) -> Result<()>;
    fn update(&self, entry_id: &str, patch: &EntryPatch, audit: AuditEvent) -> Result<MemoryEntry>;
    /// Tombstones the entry.
    fn delete(&self, entry_id: &str, audit: AuditEvent) -> Result<()>;
    fn bulk(&self, op: BulkOp, now: DateTime<Utc>) -> Result<usize>;
    fn list(&self) -> Result<Vec<MemoryEntry>>;
    fn export(&self) -> Result<MemoryExport>;
    /// Replaces the whole store with the document's contents.
    fn import(&self, doc: MemoryExport) -> Result<()>;
    fn stats(&self) -> Result<MemoryStats>;
    /// Hard delete of live entries and tombstones.
    fn purge(&self) -> Result<usize>;
}

#[derive(Debug, Clone, Default)]
struct Snapshot {
    live: BTreeMap<String, MemoryEntry>,
    deleted: BTreeMap<String, MemoryEntry>,
}

impl Snapshot {
    fn stats(&self, dimensionality: usize) -> MemoryStats {
        MemoryStats {
            count: self.live.len(),
            deleted: self.deleted.len(),
            dimensionality,
            mitigation_links: self.live.values().map(|e| e.mitigation_ids.len()).sum(),
            with_ttl: self.live.values().filter(|e| e.ttl.is_some()).count(),
            hitl_required: self.live.values().filter(|e| e.hitl_required).count(),
        }
    }

    fn best(&self, embedding: &[f64]) -> Option<(String, f64)> {
        let mut best: Option<(String, f64)> = None;
        for e in self.live.values() {
            let s = dot(embedding, &e.action_embedding);
            if best.as_ref().is_none_or(|(_, b)| s > *b) {
                best = Some((e.entry_id.clone(), s));
            }
        }
        best
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-process store with snapshot isolation: readers clone an `Arc` of the
/// current snapshot, writers serialise through one mutex and swap in a new
/// snapshot. Optionally persisted to a single JSON file.
#[derive(Debug)]
pub struct InMemoryStore {
    dimensionality: usize,
    config: MemoryConfig,
    state: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
    path: Option<PathBuf>,
}

impl InMemoryStore {
    pub fn new(dimensionality: usize, config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(InMemoryStore {
            dimensionality,
            config,
            state: RwLock::new(Arc::new(Snapshot::default())),
            writer: Mutex::new(()),
            path: None,
        })
    }

    /// Opens (or creates on first write) a store persisted at `path`.
    pub fn open(path: &Path, dimensionality: usize, config: MemoryConfig) -> Result<Self> {
        let mut store = InMemoryStore::new(dimensionality, config)?;
        store.path = Some(path.to_path_buf());
        if path.exists() {
            let text = fs::read_to_string(path)?;
            let doc: MemoryExport = serde_json::from_str(&text)
                .map_err(|e| AuraError::Storage(format!("memory file {} is corrupt: {e}", path.display())))?;
            let snap = store.snapshot_from(doc)?;
            *store.state.write().expect("memory lock") = Arc::new(snap);
        }
        Ok(store)
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.state.read().expect("memory lock").clone()
    }

    fn snapshot_from(&self, doc: MemoryExport) -> Result<Snapshot> {
        if doc.dimensionality != self.dimensionality {
            return Err(AuraError::DimensionalityMismatch {
                expected: self.dimensionality,
                got: doc.dimensionality,
            });
        }
        let mut snap = Snapshot::default();
        for e in doc.entries {
            e.validate(self.dimensionality)?;
            snap.live.insert(e.entry_id.clone(), e);
        }
        for e in doc.deleted {
            snap.deleted.insert(e.entry_id.clone(), e);
        }
        Ok(snap)
    }

    fn document(&self, snap: &Snapshot) -> MemoryExport {
        MemoryExport {
            format_version: 1,
            dimensionality: self.dimensionality,
            entries: snap.live.values().cloned().collect(),
            deleted: snap.deleted.values().cloned().collect(),
            stats: snap.stats(self.dimensionality),
        }
    }

    /// Applies `f` to a private copy of the snapshot, persists it, then
    /// publishes it.
    fn write<T>(&self, f: impl FnOnce(&mut Snapshot) -> Result<T>) -> Result<T> {
        let _guard = self.writer.lock().expect("memory writer");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        if let Some(path) = &self.path {
            persist(path, &self.document(&next))?;
        }
        *self.state.write().expect("memory lock") = Arc::new(next);
        Ok(out)
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dimensionality {
            return Err(AuraError::DimensionalityMismatch {
                expected: self.dimensionality,
                got: v.len(),
            });
        }
        Ok(())
    }
}

fn persist(path: &Path, doc: &MemoryExport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    let text = doc.to_json()?;
    fs::write(&tmp, text).map_err(|e| AuraError::Storage(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| AuraError::Storage(format!("replacing {}: {e}", path.display())))?;
    Ok(())
}

fn insert_into(snap: &mut Snapshot, entry: MemoryEntry, theta_dup: f64) -> InsertOutcome {
    if let Some((id, s)) = snap.best(&entry.action_embedding) {
        if s >= theta_dup {
            return InsertOutcome::Rejected {
                duplicate_of: id,
                similarity: s,
            };
        }
    }
    if snap.live.contains_key(&entry.entry_id) {
        return InsertOutcome::Rejected {
            duplicate_of: entry.entry_id.clone(),
            similarity: 1.0,
        };
    }
    let id = entry.entry_id.clone();
    snap.deleted.remove(&id);
    snap.live.insert(id.clone(), entry);
    InsertOutcome::Accepted { entry_id: id }
}

impl MemoryBackend for InMemoryStore {
    fn dimensionality(&self) -> usize {
        self.dimensionality
    }

    fn config(&self) -> MemoryConfig {
        self.config
    }

    fn query(&self, embedding: &[f64], k: usize) -> Result<MatchResult> {
        self.check_dim(embedding)?;
        let snap = self.snapshot();
        let mut scored: Vec<Neighbor> = snap
            .live
            .values()
            .map(|e| Neighbor {
                entry_id: e.entry_id.clone(),
                similarity: dot(embedding, &e.action_embedding),
            })
            .collect();
        scored.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.entry_id.cmp(&b.entry_id))
        });
        scored.truncate(k);
        let kind = match scored.first().map(|n| n.similarity) {
            Some(s) if s >= self.config.theta_exact => MatchKind::Exact,
            Some(s) if s >= self.config.theta_near => MatchKind::Near,
            _ => MatchKind::None,
        };
        Ok(MatchResult {
            kind,
            neighbors: scored,
            differing_contexts: Vec::new(),
        })
    }

    fn get(&self, entry_id: &str) -> Result<MemoryEntry> {
        self.snapshot()
            .live
            .get(entry_id)
            .cloned()
            .ok_or_else(|| AuraError::not_found("memory entry", entry_id))
    }

    fn insert(&self, entry: MemoryEntry) -> Result<InsertOutcome> {
        entry.validate(self.dimensionality)?;
        let theta = self.config.theta_dup;
        self.write(|snap| Ok(insert_into(snap, entry, theta)))
    }

    fn upsert(&self, entry: MemoryEntry) -> Result<()> {
        entry.validate(self.dimensionality)?;
        self.write(|snap| {
            snap.deleted.remove(&entry.entry_id);
            snap.live.insert(entry.entry_id.clone(), entry);
            Ok(())
        })
    }

    fn update(&self, entry_id: &str, patch: &EntryPatch, audit: AuditEvent) -> Result<MemoryEntry> {
        let dim = self.dimensionality;
        self.write(|snap| {
            let current = snap
                .live
                .get(entry_id)
                .ok_or_else(|| AuraError::not_found("memory entry", entry_id))?;
            let mut next = current.clone();
            patch.apply(&mut next);
            next.validate(dim)?;
            next.audit.push(audit);
            snap.live.insert(entry_id.to_string(), next.clone());
            Ok(next)
        })
    }

    fn delete(&self, entry_id: &str, audit: AuditEvent) -> Result<()> {
        self.write(|snap| {
            let mut e = snap
                .live
                .remove(entry_id)
                .ok_or_else(|| AuraError::not_found("memory entry", entry_id))?;
            e.audit.push(audit);
            snap.deleted.insert(entry_id.to_string(), e);
            Ok(())
        })
    }

    fn bulk(&self, op: BulkOp, now: DateTime<Utc>) -> Result<usize> {
        let dim = self.dimensionality;
        let theta = self.config.theta_dup;
        match op {
            BulkOp::Add { entries } => {
                for e in &entries {
                    e.validate(dim)?;
                }
                self.write(|snap| {
                    Ok(entries
                        .into_iter()
                        .map(|e| insert_into(snap, e, theta))
                        .filter(|o| matches!(o, InsertOutcome::Accepted { .. }))
                        .count())
                })
            }
            BulkOp::Update { selector, patch } => self.write(|snap| {
                let ids: Vec<String> = snap
                    .live
                    .values()
                    .filter(|e| selector.matches(e, now))
                    .map(|e| e.entry_id.clone())
                    .collect();
                let mut updated = Vec::with_capacity(ids.len());
                for id in &ids {
                    let mut e = snap.live[id].clone();
                    patch.apply(&mut e);
                    e.validate(dim)?;
                    e.audit.push(AuditEvent {
                        at: now,
                        actor: "system".into(),
                        kind: "bulk_update".into(),
                        detail: serde_json::to_value(&patch)?,
                    });
                    updated.push(e);
                }
                for e in updated {
                    snap.live.insert(e.entry_id.clone(), e);
                }
                Ok(ids.len())
            }),
            BulkOp::Delete { selector } => self.write(|snap| {
                let ids: Vec<String> = snap
                    .live
                    .values()
                    .filter(|e| selector.matches(e, now))
                    .map(|e| e.entry_id.clone())
                    .collect();
                for id in &ids {
                    let mut e = snap.live.remove(id).expect("selected entry");
                    e.audit.push(AuditEvent {
                        at: now,
                        actor: "system".into(),
                        kind: "bulk_delete".into(),
                        detail: serde_json::Value::Null,
                    });
                    snap.deleted.insert(id.clone(), e);
                }
                Ok(ids.len())
            }),
        }
    }

    fn list(&self) -> Result<Vec<MemoryEntry>> {
        Ok(self.snapshot().live.values().cloned().collect())
    }

    fn export(&self) -> Result<MemoryExport> {
        Ok(self.document(&self.snapshot()))
    }

    fn import(&self, doc: MemoryExport) -> Result<()> {
        let snap = self.snapshot_from(doc)?;
        self.write(|s| {
            *s = snap;
            Ok(())
        })
    }

    fn stats(&self) -> Result<MemoryStats> {
        Ok(self.snapshot().stats(self.dimensionality))
    }

    fn purge(&self) -> Result<usize> {
        self.write(|snap| {
            let n = snap.live.len() + snap.deleted.len();
            *snap = Snapshot::default();
            Ok(n)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Derivation;
    use chrono::{Duration, TimeZone};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap()
    }

    /// Unit vector `cos(theta) e0 + sin(theta) e1` in 4 dimensions.
    fn planted(cos: f64) -> Vec<f64> {
        vec![cos, (1.0 - cos * cos).sqrt(), 0.0, 0.0]
    }

    fn entry(id: &str, v: Vec<f64>) -> MemoryEntry {
        let result = GammaResult {
            gamma: 0.5,
            u_total: 1.0,
            gamma_norm: 50.0,
            mean_weighted_score: 0.5,
            variance: 0.0,
            concentration: 0.0,
            pair_contributions: vec![crate::scoring::PairContribution {
                context_id: "c".into(),
                dimension_id: "d".into(),
                weight: 1.0,
                score: 0.5,
                contribution: 0.5,
            }],
            dimension_risk: BTreeMap::new(),
            degenerate: false,
        };
        MemoryEntry::new(id, v, ActionRecord::new("act", "i", "a"), &result, t0())
    }

    fn store() -> InMemoryStore {
        InMemoryStore::new(4, MemoryConfig::default()).unwrap()
    }

    fn audit() -> AuditEvent {
        AuditEvent {
            at: t0(),
            actor: "human:test".into(),
            kind: "edit".into(),
            detail: serde_json::Value::Null,
        }
    }

    #[test]
    fn empty_store_matches_nothing() {
        let m = store().query(&planted(1.0), 3).unwrap();
        assert_eq!(m.kind, MatchKind::None);
        assert!(m.neighbors.is_empty());
    }

    #[test]
    fn self_query_is_exact() {
        let s = store();
        s.insert(entry("a", planted(1.0))).unwrap();
        let m = s.query(&planted(1.0), 3).unwrap();
        assert_eq!(m.kind, MatchKind::Exact);
        assert!((m.neighbors[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planted_angle_near_match() {
        let s = store();
        s.insert(entry("a", planted(1.0))).unwrap();
        let q = planted(0.90);
        let direct = dot(&q, &planted(1.0));
        assert!((direct - 0.90).abs() < 1e-12);
        let m = s.query(&q, 3).unwrap();
        assert_eq!(m.kind, MatchKind::Near);
        assert!((m.neighbors[0].similarity - 0.90).abs() < 1e-12);
    }

    #[test]
    fn duplicates_rejected_at_theta_dup() {
        let s = store();
        assert!(matches!(s.insert(entry("a", planted(1.0))).unwrap(), InsertOutcome::Accepted { .. }));
        let out = s.insert(entry("b", planted(0.96))).unwrap();
        assert_eq!(
            out,
            InsertOutcome::Rejected {
                duplicate_of: "a".into(),
                similarity: dot(&planted(0.96), &planted(1.0))
            }
        );
        assert!(matches!(s.insert(entry("c", planted(0.94))).unwrap(), InsertOutcome::Accepted { .. }));
        let same = s.insert(entry("d", planted(1.0))).unwrap();
        assert!(matches!(same, InsertOutcome::Rejected { ref duplicate_of, .. } if duplicate_of == "a"));
    }

    #[test]
    fn neighbours_sorted_and_capped() {
        let s = InMemoryStore::new(4, MemoryConfig { theta_dup: 0.999, ..Default::default() }).unwrap();
        for (id, c) in [("a", 0.2), ("b", 0.9), ("c", 0.5), ("d", 0.7)] {
            s.insert(entry(id, planted(c))).unwrap();
        }
        let m = s.query(&planted(1.0), 3).unwrap();
        let ids: Vec<_> = m.neighbors.iter().map(|n| n.entry_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "d", "c"]);
    }

    #[test]
    fn dimensionality_is_checked() {
        assert!(matches!(
            store().query(&[1.0, 0.0], 3),
            Err(AuraError::DimensionalityMismatch { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        let s = store();
        let mut bad = entry("a", planted(1.0));
        bad.local_gammas[0].contribution = 0.4;
        assert!(matches!(s.insert(bad), Err(AuraError::Validation(_))));
        let mut bad = entry("a", vec![1.0, 1.0, 0.0, 0.0]);
        bad.ttl = Some(t0() - Duration::days(1));
        assert!(matches!(s.insert(bad), Err(AuraError::Validation(v)) if v.len() == 2));
    }

    #[test]
    fn delete_tombstones_and_hides_from_search() {
        let s = store();
        s.insert(entry("a", planted(1.0))).unwrap();
        s.delete("a", audit()).unwrap();
        assert_eq!(s.query(&planted(1.0), 3).unwrap().kind, MatchKind::None);
        let doc = s.export().unwrap();
        assert_eq!(doc.entries.len(), 0);
        assert_eq!(doc.deleted.len(), 1);
        assert!(matches!(s.delete("a", audit()), Err(AuraError::NotFound { .. })));
    }

    #[test]
    fn ttl_bulk_delete_counts() {
        let s = InMemoryStore::new(4, MemoryConfig { theta_dup: 1.0, ..Default::default() }).unwrap();
        let now = t0() + Duration::days(30);
        for i in 0..10 {
            let mut e = entry(&format!("e{i}"), planted(1.0 - i as f64 * 0.01));
            if i < 3 {
                e.ttl = Some(t0() + Duration::days(1));
            } else if i < 6 {
                e.ttl = Some(t0() + Duration::days(60));
            }
            assert!(matches!(s.insert(e).unwrap(), InsertOutcome::Accepted { .. }));
        }
        let expired: usize = s.list().unwrap().iter().filter(|e| e.is_expired(now)).count();
        assert_eq!(expired, 3);
        assert_eq!(s.bulk(BulkOp::Delete { selector: Selector::expired() }, now).unwrap(), 3);
        assert_eq!(s.stats().unwrap().count, 7);
        let none = Selector {
            status: Some("archived".into()),
            ..Default::default()
        };
        let patch = EntryPatch {
            notes: Some("x".into()),
            ..Default::default()
        };
        assert_eq!(s.bulk(BulkOp::Update { selector: none, patch }, now).unwrap(), 0);
    }

    #[test]
    fn edited_ttl_changes_bulk_selection() {
        let s = store();
        s.insert(entry("a", planted(1.0))).unwrap();
        let now = t0() + Duration::days(2);
        let patch = EntryPatch {
            ttl: Some(t0() + Duration::days(1)),
            ..Default::default()
        };
        s.update("a", &patch, audit()).unwrap();
        assert_eq!(s.bulk(BulkOp::Delete { selector: Selector::expired() }, now).unwrap(), 1);
    }

    #[test]
    fn update_breaking_sum_is_rejected() {
        let s = store();
        s.insert(entry("a", planted(1.0))).unwrap();
        let patch = EntryPatch {
            local_gammas: Some(vec![]),
            ..Default::default()
        };
        assert!(matches!(s.update("a", &patch, audit()), Err(AuraError::Validation(_))));
        assert_eq!(s.get("a").unwrap().local_gammas.len(), 1);
    }

    #[test]
    fn bulk_add_counts_accepted() {
        let s = store();
        let n = s
            .bulk(
                BulkOp::Add {
                    entries: vec![entry("a", planted(1.0)), entry("b", planted(0.999)), entry("c", planted(0.5))],
                },
                t0(),
            )
            .unwrap();
        assert_eq!(n, 2);
    }

    #[test]
    fn export_import_round_trip_is_byte_identical() {
        let s = store();
        assert_eq!(s.export().unwrap().entries.len(), 0);
        s.insert(entry("a", planted(1.0))).unwrap();
        s.insert(entry("b", planted(0.3))).unwrap();
        s.delete("b", audit()).unwrap();
        let first = s.export().unwrap().to_json().unwrap();
        let other = store();
        other.import(serde_json::from_str(&first).unwrap()).unwrap();
        let second = other.export().unwrap().to_json().unwrap();
        assert_eq!(first, second);
        assert_eq!(other.stats().unwrap().count, 1);
    }

    #[test]
    fn file_persistence() {
        let dir = std::env::temp_dir().join(format!("aura-mem-{}", std::process::id()));
        let path = dir.join("memory.json");
        let _ = fs::remove_file(&path);
        {
            let s = InMemoryStore::open(&path, 4, MemoryConfig::default()).unwrap();
            s.insert(entry("a", planted(1.0))).unwrap();
        }
        let s = InMemoryStore::open(&path, 4, MemoryConfig::default()).unwrap();
        assert_eq!(s.get("a").unwrap().entry_id, "a");
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn threshold_ordering_enforced() {
        let bad = MemoryConfig {
            theta_dup: 0.8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reuse_plans() {
        let ctx = |id: &str, label: &str| ContextItem::new(id, label, Derivation::Declared);
        let stored = vec![ctx("site_trust", "untrusted_domain"), ctx("time_of_day", "evening")];
        let current = vec![ctx("site_trust", "untrusted_domain"), ctx("time_of_day", "morning")];
        assert_eq!(differing_contexts(&stored, &current), vec!["time_of_day".to_string()]);

        let mut e = entry("a", planted(1.0));
        let m = MatchResult {
            kind: MatchKind::Near,
            neighbors: vec![Neighbor {
                entry_id: "a".into(),
                similarity: 0.9,
            }],
            differing_contexts: vec![],
        };
        assert_eq!(reuse(&m, Some(&e), &current, t0()), ReusePlan::None { stale_entry: None });
        e.assessment = Some(StoredAssessment {
            contexts: stored,
            dimensions: vec![],
            weights: WeightScheme::default(),
            scores: ScoreMatrix::default(),
            profile: crate::testutil::profile_at(50.0),
            mitigations: vec![],
        });
        assert_eq!(
            reuse(&m, Some(&e), &current, t0()),
            ReusePlan::Partial {
                entry_id: "a".into(),
                differing_contexts: vec!["time_of_day".into()]
            }
        );
        e.ttl = Some(t0() + Duration::hours(1));
        assert_eq!(
            reuse(&m, Some(&e), &current, t0() + Duration::hours(2)),
            ReusePlan::None {
                stale_entry: Some("a".into())
            }
        );
        assert_eq!(reuse(&MatchResult::none(), None, &current, t0()), ReusePlan::None { stale_entry: None });
    }
}
