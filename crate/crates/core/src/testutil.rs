use crate::model::{RiskProfile, Uncertainty};
use crate::profiling::{label, ProfileBreakdown, Quadrant, ThresholdPolicy};

pub(crate) fn profile_at(gamma_norm: f64) -> RiskProfile {
    let policy = ThresholdPolicy::default();
    let (level, decision) = label(gamma_norm, &policy);
    RiskProfile {
        action_id: "a".into(),
        gamma: gamma_norm / 100.0,
        u_total: 1.0,
        gamma_norm,
        uncertainty: Uncertainty { variance: 0.0, concentration: 0.0 },
        level,
        decision,
        quadrant: Quadrant::LowEven,
        top_dimensions: vec![],
        breakdown: ProfileBreakdown::default(),
        mitigation_id: None,
        mitigation_ids: vec![],
        mitigation_steps: vec![],
        warnings: vec![],
        trace_id: "t".into(),
        version: 1,
    }
}
