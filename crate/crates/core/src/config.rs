//! Engine configuration and the dotted-key editor behind `config set`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AuraError, Result};
use crate::evaluator::Budget;
use crate::hitl::HitlConfig;
use crate::memory::MemoryConfig;
use crate::mitigation::PreferenceRecord;
use crate::model::to_percent_scale;
use crate::profiling::ThresholdPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySettings {
    pub theta_exact: f64,
    pub theta_near: f64,
    pub k: usize,
    pub embedding_dim: usize,
    /// Remote memory service; the local store is used when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl Default for MemorySettings {
    fn default() -> Self {
        let m = MemoryConfig::default();
        MemorySettings {
            theta_exact: m.theta_exact,
            theta_near: m.theta_near,
            k: m.k,
            embedding_dim: crate::embed::HashEmbedder::DEFAULT_DIM,
            url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Store every finished assessment in memory.
    pub auto_save: bool,
    /// Duplicate-rejection similarity on the canonical 0–100 scale.
    pub auto_save_threshold: f64,
    pub seed: u64,
    pub memory: MemorySettings,
    pub hitl: HitlConfig,
    /// Park assessments with uncertainty flags for human review.
    pub hitl_enabled: bool,
    pub policy: ThresholdPolicy,
    pub budget: Budget,
    pub verbose: bool,
    pub think: bool,
    /// Worker threads for batch assessment; 0 picks a default.
    pub jobs: usize,
    pub top_n: usize,
    /// Gamma share targeted by model-proposed mitigations.
    pub pareto_share: f64,
    /// Approvals after which a low-risk action skips the human gate.
    pub approvals_required: u32,
    pub roles: Vec<String>,
    pub preferences: Vec<PreferenceRecord>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            auto_save: true,
            auto_save_threshold: 95.0,
            seed: 0,
            memory: MemorySettings::default(),
            hitl: HitlConfig::default(),
            hitl_enabled: true,
            policy: ThresholdPolicy::default(),
            budget: Budget::default(),
            verbose: false,
            think: false,
            jobs: 0,
            top_n: 3,
            pareto_share: 0.8,
            approvals_required: 3,
            roles: Vec::new(),
            preferences: Vec::new(),
        }
    }
}

impl EngineConfig {
    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            theta_exact: self.memory.theta_exact,
            theta_near: self.memory.theta_near,
            theta_dup: self.auto_save_threshold / 100.0,
            k: self.memory.k,
        }
    }

    /// Evaluator budget, widened when deep reasoning is requested.
    pub fn effective_budget(&self) -> Budget {
        if self.think {
            Budget {
                deep: true,
                ..Budget::deep()
            }
        } else {
            self.budget
        }
    }

    pub fn validate(&self) -> Result<()> {
        if to_percent_scale(self.auto_save_threshold) != Some(self.auto_save_threshold) || self.auto_save_threshold <= 1.0
        {
            return Err(AuraError::Config(format!(
                "auto_save_threshold {} is not on the 0–100 scale",
                self.auto_save_threshold
            )));
        }
        self.memory_config().validate()?;
        if self.memory.embedding_dim == 0 {
            return Err(AuraError::Config("memory.embedding_dim must be positive".into()));
        }
        self.policy.validate()?;
        let h = &self.hitl;
        for (name, v) in [
            ("hitl.variance_threshold", h.variance_threshold),
            ("hitl.confidence_threshold", h.confidence_threshold),
            ("hitl.conflict_delta", h.conflict_delta),
            ("hitl.sparse_margin", h.sparse_margin),
            ("pareto_share", self.pareto_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AuraError::Config(format!("{name} = {v} must lie in [0,1]")));
            }
        }
        for p in &self.preferences {
            p.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: EngineConfig = serde_json::from_str(text).map_err(|e| AuraError::Config(e.to_string()))?;
        c.normalize();
        c.validate()?;
        Ok(c)
    }

    fn normalize(&mut self) {
        if let Some(t) = to_percent_scale(self.auto_save_threshold) {
            self.auto_save_threshold = t;
        }
    }

    /// Sets a dotted key such as `auto_save`, `memory.theta_near` or
    /// `policy.cut_points`. The value is read as JSON, falling back to a
    /// plain string. `auto_save_threshold` accepts either scale.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut cursor = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| AuraError::Config(format!("'{key}' does not name a setting")))?;
            if i + 1 == parts.len() {
                if !obj.contains_key(*part) && !is_optional_key(key) {
                    return Err(AuraError::Config(format!("unknown setting '{key}'")));
                }
                obj.insert(part.to_string(), value.clone());
                break;
            }
            cursor = obj
                .get_mut(*part)
                .ok_or_else(|| AuraError::Config(format!("unknown setting '{key}'")))?;
        }
        let mut next: EngineConfig =
            serde_json::from_value(doc).map_err(|e| AuraError::Config(format!("{key}: {e}")))?;
        next.normalize();
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Adds or replaces the preference for the record's user and intent.
    pub fn upsert_preference(&mut self, record: PreferenceRecord) -> Result<()> {
        record.validate()?;
        self.preferences
            .retain(|p| !(p.user_id == record.user_id && p.intent == record.intent));
        self.preferences.push(record);
        Ok(())
    }
}

fn is_optional_key(key: &str) -> bool {
    matches!(key, "memory.url" | "budget.max_calls" | "budget.max_latency_ms")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = EngineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.memory_config().theta_dup, 0.95);
    }

    #[test]
    fn threshold_accepts_both_scales() {
        let mut c = EngineConfig::default();
        c.set("auto_save_threshold", "0.9").unwrap();
        assert_eq!(c.auto_save_threshold, 90.0);
        c.set("auto_save_threshold", "97").unwrap();
        assert_eq!(c.auto_save_threshold, 97.0);
        assert!(c.set("auto_save_threshold", "140").is_err());
        assert_eq!(c.auto_save_threshold, 97.0);
    }

    #[test]
    fn dup_threshold_below_near_is_rejected() {
        let mut c = EngineConfig::default();
        assert!(c.set("auto_save_threshold", "50").is_err());
    }

    #[test]
    fn nested_and_unknown_keys() {
        let mut c = EngineConfig::default();
        c.set("auto_save", "false").unwrap();
        assert!(!c.auto_save);
        c.set("memory.theta_near", "0.8").unwrap();
        assert_eq!(c.memory.theta_near, 0.8);
        c.set("memory.url", "http://localhost:8080").unwrap();
        assert_eq!(c.memory.url.as_deref(), Some("http://localhost:8080"));
        assert!(matches!(c.set("nope", "1"), Err(AuraError::Config(_))));
        assert!(matches!(c.set("auto_save", "maybe"), Err(AuraError::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let c = EngineConfig::default();
        assert_eq!(EngineConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        let fractional = EngineConfig::from_json(r#"{"auto_save_threshold": 0.95}"#).unwrap();
        assert_eq!(fractional.auto_save_threshold, 95.0);
    }
}
