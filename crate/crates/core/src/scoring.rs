//! The gamma calculus: weighted linear aggregation of pair scores, its
//! normalisation, the weighted variance and the concentration coefficient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AuraError, Result};
use crate::model::{
    validate_weights_and_scores, Dimension, PairKey, SchemeKind, ScoreMatrix, WeightScheme,
};

/// Contribution `w(c,d) * s(c,d)` of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairContribution {
    pub context_id: String,
    pub dimension_id: String,
    pub weight: f64,
    pub score: f64,
    pub contribution: f64,
}

impl PairContribution {
    pub fn key(&self) -> PairKey {
        PairKey::new(&self.context_id, &self.dimension_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaResult {
    pub gamma: f64,
    pub u_total: f64,
    pub gamma_norm: f64,
    pub mean_weighted_score: f64,
    pub variance: f64,
    pub concentration: f64,
    pub pair_contributions: Vec<PairContribution>,
    /// `sum_c p(c|d) * s(c,d)` per dimension, in [0,1].
    #[serde(default)]
    pub dimension_risk: BTreeMap<String, f64>,
    /// Set when the total budget is zero; every derived metric is then 0.
    #[serde(default)]
    pub degenerate: bool,
}

impl GammaResult {
    pub fn contribution_map(&self) -> BTreeMap<PairKey, f64> {
        self.pair_contributions
            .iter()
            .map(|p| (p.key(), p.contribution))
            .collect()
    }
}

fn check(weights: &WeightScheme, scores: &ScoreMatrix) -> Result<()> {
    let violations = validate_weights_and_scores(weights, scores);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(AuraError::Validation(violations))
    }
}

/// Raw gamma: `sum_d u_d * sum_{c in C_d} p(c|d) * s(c,d)`. Absent pairs
/// contribute nothing.
pub fn gamma_raw(weights: &WeightScheme, scores: &ScoreMatrix) -> Result<f64> {
    check(weights, scores)?;
    Ok(raw_sum(weights, scores))
}

fn raw_sum(weights: &WeightScheme, scores: &ScoreMatrix) -> f64 {
    scores
        .entries
        .iter()
        .map(|(k, e)| weights.joint_weight(&k.context_id, &k.dimension_id) * e.score)
        .sum()
}

/// `100 * gamma / u_total`.
pub fn gamma_norm(gamma: f64, u_total: f64) -> Result<f64> {
    if u_total <= 0.0 {
        return Err(AuraError::DegenerateWeights);
    }
    if gamma < -crate::model::EPS || gamma > u_total + crate::model::EPS {
        return Err(AuraError::Precondition(format!(
            "gamma {gamma} outside [0, {u_total}]"
        )));
    }
    Ok((100.0 * gamma / u_total).clamp(0.0, 100.0))
}

/// Weighted variance of pair scores around `gamma / u_total`, and the
/// concentration coefficient `200 * sqrt(variance)` clamped to [0,100].
pub fn gamma_variance(weights: &WeightScheme, scores: &ScoreMatrix) -> Result<(f64, f64)> {
    check(weights, scores)?;
    let u_total = weights.u_total();
    if u_total <= 0.0 {
        return Err(AuraError::DegenerateWeights);
    }
    Ok(variance_of(weights, scores, raw_sum(weights, scores), u_total))
}

fn variance_of(weights: &WeightScheme, scores: &ScoreMatrix, gamma: f64, u_total: f64) -> (f64, f64) {
    let mean = gamma / u_total;
    let spread: f64 = scores
        .entries
        .iter()
        .map(|(k, e)| {
            let w = weights.joint_weight(&k.context_id, &k.dimension_id);
            w * (e.score - mean).powi(2)
        })
        .sum();
    let variance = (spread / u_total).max(0.0);
    (variance, concentration(variance))
}

pub fn concentration(variance: f64) -> f64 {
    (200.0 * variance.max(0.0).sqrt()).clamp(0.0, 100.0)
}

/// Full evaluation. A zero total budget yields a degenerate result with every
/// metric at zero instead of an error.
pub fn evaluate(weights: &WeightScheme, scores: &ScoreMatrix) -> Result<GammaResult> {
    check(weights, scores)?;
    let u_total = weights.u_total();
    let pair_contributions: Vec<PairContribution> = scores
        .entries
        .iter()
        .map(|(k, e)| {
            let w = weights.joint_weight(&k.context_id, &k.dimension_id);
            PairContribution {
                context_id: k.context_id.clone(),
                dimension_id: k.dimension_id.clone(),
                weight: w,
                score: e.score,
                contribution: w * e.score,
            }
        })
        .collect();
    let gamma: f64 = pair_contributions.iter().map(|p| p.contribution).sum();
    let mut dimension_risk: BTreeMap<String, f64> = weights
        .dimension_weights
        .keys()
        .map(|d| (d.clone(), 0.0))
        .collect();
    for (k, e) in &scores.entries {
        let p = weights.p(&k.context_id, &k.dimension_id).unwrap_or(0.0);
        *dimension_risk.entry(k.dimension_id.clone()).or_default() += p * e.score;
    }
    if u_total <= 0.0 {
        return Ok(GammaResult {
            gamma,
            u_total,
            gamma_norm: 0.0,
            mean_weighted_score: 0.0,
            variance: 0.0,
            concentration: 0.0,
            pair_contributions,
            dimension_risk,
            degenerate: true,
        });
    }
    let (variance, conc) = variance_of(weights, scores, gamma, u_total);
    Ok(GammaResult {
        gamma,
        u_total,
        gamma_norm: gamma_norm(gamma.clamp(0.0, u_total), u_total)?,
        mean_weighted_score: gamma / u_total,
        variance,
        concentration: conc,
        pair_contributions,
        dimension_risk,
        degenerate: false,
    })
}

fn contexts_for<'a>(
    dims: &'a [Dimension],
    contexts_per_dim: &'a BTreeMap<String, Vec<String>>,
) -> Result<Vec<(&'a str, &'a [String])>> {
    if dims.is_empty() {
        return Err(AuraError::EmptyDimensionSet);
    }
    dims.iter()
        .map(|d| {
            let ctx = contexts_per_dim
                .get(&d.dimension_id)
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            if ctx.is_empty() {
                Err(AuraError::Precondition(format!(
                    "dimension '{}' has no applicable context",
                    d.dimension_id
                )))
            } else {
                Ok((d.dimension_id.as_str(), ctx))
            }
        })
        .collect()
}

/// Every dimension weighs 1, contexts share it evenly: `U_tot = |D|`.
pub fn equal_weight_scheme(
    dims: &[Dimension],
    contexts_per_dim: &BTreeMap<String, Vec<String>>,
) -> Result<WeightScheme> {
    let mut scheme = WeightScheme {
        scheme_kind: SchemeKind::Equal,
        ..Default::default()
    };
    for (d, ctx) in contexts_for(dims, contexts_per_dim)? {
        scheme.dimension_weights.insert(d.to_string(), 1.0);
        scheme.set_uniform_contexts(d, ctx);
    }
    Ok(scheme)
}

/// Dimension weight proportional to its number of applicable contexts,
/// with proportionality constant 1.
pub fn frequency_weight_scheme(
    dims: &[Dimension],
    contexts_per_dim: &BTreeMap<String, Vec<String>>,
) -> Result<WeightScheme> {
    frequency_weight_scheme_scaled(dims, contexts_per_dim, 1.0)
}

/// `u_d = k * |C_d|`. The normalised gamma does not depend on `k`.
pub fn frequency_weight_scheme_scaled(
    dims: &[Dimension],
    contexts_per_dim: &BTreeMap<String, Vec<String>>,
    k: f64,
) -> Result<WeightScheme> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(AuraError::InvalidInput(format!(
            "proportionality constant must be positive, got {k}"
        )));
    }
    let mut scheme = WeightScheme {
        scheme_kind: SchemeKind::Frequency,
        ..Default::default()
    };
    for (d, ctx) in contexts_for(dims, contexts_per_dim)? {
        scheme
            .dimension_weights
            .insert(d.to_string(), k * ctx.len() as f64);
        scheme.set_uniform_contexts(d, ctx);
    }
    Ok(scheme)
}
