//! Turns a gamma result into labels, decision bands and the analysis
//! datasets behind the risk profile (radar, share bars, histogram,
//! pair correlations and clusters).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{AuraError, Result};
use crate::model::{Decision, Dimension, PairKey, TopDimension, EPS};
use crate::scoring::GammaResult;

/// Cut points `T_0 < T_1 < ... < T_{n+1}` on the 0–100 scale with one label
/// per band. Bands are lower-closed; the last band is closed on both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub cut_points: Vec<f64>,
    pub labels: Vec<String>,
    pub band_decisions: BTreeMap<String, Decision>,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            cut_points: vec![0.0, 30.0, 60.0, 100.0],
            labels: vec!["Low".into(), "Medium".into(), "High".into()],
            band_decisions: BTreeMap::from([
                ("Low".into(), Decision::Allow),
                ("Medium".into(), Decision::Warn),
                ("High".into(), Decision::Escalate),
            ]),
        }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        let cuts = &self.cut_points;
        if cuts.len() < 2 {
            return Err(AuraError::InvalidInput("a policy needs at least two cut points".into()));
        }
        if cuts[0] != 0.0 || *cuts.last().unwrap() != 100.0 {
            return Err(AuraError::InvalidInput("cut points must start at 0 and end at 100".into()));
        }
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AuraError::InvalidInput("cut points must be strictly ascending".into()));
        }
        if self.labels.len() != cuts.len() - 1 {
            return Err(AuraError::InvalidInput(format!(
                "{} labels for {} bands",
                self.labels.len(),
                cuts.len() - 1
            )));
        }
        if let Some(l) = self.labels.iter().find(|l| !self.band_decisions.contains_key(*l)) {
            return Err(AuraError::InvalidInput(format!("band '{l}' has no decision")));
        }
        Ok(())
    }

    /// Index of the band holding `gamma_norm`.
    pub fn band(&self, gamma_norm: f64) -> usize {
        let g = gamma_norm.clamp(0.0, 100.0);
        let last = self.labels.len() - 1;
        (0..last)
            .find(|&i| g < self.cut_points[i + 1])
            .unwrap_or(last)
    }

    pub fn lowest_label(&self) -> &str {
        &self.labels[0]
    }

    /// Boundary between "low" and "high" gamma for quadrant advice: the
    /// upper edge of the lowest band.
    pub fn quadrant_threshold(&self) -> f64 {
        self.cut_points.get(1).copied().unwrap_or(50.0)
    }
}

/// Label and band decision of a normalised gamma.
pub fn label(gamma_norm: f64, policy: &ThresholdPolicy) -> (String, Decision) {
    let i = policy.band(gamma_norm);
    let name = policy.labels[i].clone();
    let decision = policy
        .band_decisions
        .get(&name)
        .copied()
        .unwrap_or(Decision::Escalate);
    (name, decision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    LowEven,
    LowConcentrated,
    HighUniform,
    HighConcentrated,
}

impl Quadrant {
    pub fn advice(&self) -> &'static str {
        match self {
            Quadrant::LowEven => "No action or light monitoring.",
            Quadrant::LowConcentrated => "Targeted review of outliers.",
            Quadrant::HighUniform => "Apply broad mitigations across all areas.",
            Quadrant::HighConcentrated => {
                "Prioritise strongest mitigations for high-weight, high-score pairs."
            }
        }
    }
}

/// Values sitting exactly on a threshold count as high.
pub fn interpret_quadrant(
    gamma_norm: f64,
    variance: f64,
    gamma_threshold: f64,
    variance_threshold: f64,
) -> Quadrant {
    let high_gamma = gamma_norm >= gamma_threshold;
    let high_var = variance >= variance_threshold;
    match (high_gamma, high_var) {
        (false, false) => Quadrant::LowEven,
        (false, true) => Quadrant::LowConcentrated,
        (true, false) => Quadrant::HighUniform,
        (true, true) => Quadrant::HighConcentrated,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub a: PairKey,
    pub b: PairKey,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWeight {
    pub context_id: String,
    pub dimension_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProfileBreakdown {
    pub radar: BTreeMap<String, f64>,
    pub context_shares: BTreeMap<String, f64>,
    pub dimension_shares: BTreeMap<String, f64>,
    pub histogram: Vec<HistogramBin>,
    pub correlations: Vec<PairCorrelation>,
    pub clusters: Vec<Vec<PairKey>>,
    /// Joint weights `w(c,d)` of every scored pair.
    pub pair_weights: Vec<PairWeight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakdownConfig {
    pub histogram_bins: usize,
    pub cluster_cutoff: f64,
    /// Minimum number of snapshots (history plus current) for correlations.
    pub min_window: usize,
}

impl Default for BreakdownConfig {
    fn default() -> Self {
        BreakdownConfig {
            histogram_bins: 10,
            cluster_cutoff: 0.8,
            min_window: 3,
        }
    }
}

pub fn build_breakdown(result: &GammaResult, history_window: &[GammaResult]) -> ProfileBreakdown {
    build_breakdown_with(result, history_window, &BreakdownConfig::default())
}

/// Correlations run over the contribution series of each pair across the
/// history window followed by the current result.
pub fn build_breakdown_with(
    result: &GammaResult,
    history_window: &[GammaResult],
    cfg: &BreakdownConfig,
) -> ProfileBreakdown {
    let mut b = ProfileBreakdown {
        radar: radar(result),
        pair_weights: result
            .pair_contributions
            .iter()
            .map(|p| PairWeight {
                context_id: p.context_id.clone(),
                dimension_id: p.dimension_id.clone(),
                weight: p.weight,
            })
            .collect(),
        histogram: histogram(result, cfg.histogram_bins.max(1)),
        ..Default::default()
    };

    if result.gamma > EPS {
        for p in &result.pair_contributions {
            *b.context_shares.entry(p.context_id.clone()).or_default() += p.contribution / result.gamma;
            *b.dimension_shares.entry(p.dimension_id.clone()).or_default() +=
                p.contribution / result.gamma;
        }
    }

    if history_window.len() + 1 >= cfg.min_window.max(2) {
        let mut window: Vec<&GammaResult> = history_window.iter().collect();
        window.push(result);
        let (corr, matrix) = correlations(result, &window);
        b.clusters = clusters(result, &matrix, cfg.cluster_cutoff);
        b.correlations = corr;
    }
    b
}

/// Per-dimension weighted risk `sum_c p(c|d) s(c,d)`, in [0,1].
fn radar(result: &GammaResult) -> BTreeMap<String, f64> {
    result.dimension_risk.clone()
}

fn histogram(result: &GammaResult, bins: usize) -> Vec<HistogramBin> {
    let max = result
        .pair_contributions
        .iter()
        .map(|p| p.contribution)
        .fold(0.0_f64, f64::max);
    let width = max / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lower: width * i as f64,
            upper: if i + 1 == bins { max } else { width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for p in &result.pair_contributions {
        let idx = if max <= 0.0 {
            0
        } else {
            ((p.contribution / width).floor() as usize).min(bins - 1)
        };
        out[idx].count += 1;
    }
    out
}

type CorrMatrix = BTreeMap<(PairKey, PairKey), f64>;

fn correlations(current: &GammaResult, window: &[&GammaResult]) -> (Vec<PairCorrelation>, CorrMatrix) {
    let keys: Vec<PairKey> = current.pair_contributions.iter().map(|p| p.key()).collect();
    let maps: Vec<BTreeMap<PairKey, f64>> = window.iter().map(|g| g.contribution_map()).collect();
    let series: Vec<Vec<f64>> = keys
        .iter()
        .map(|k| maps.iter().map(|m| m.get(k).copied().unwrap_or(0.0)).collect())
        .collect();
    let mut out = Vec::new();
    let mut matrix = BTreeMap::new();
    for i in 0..keys.len() {
        for j in (i + 1)..keys.len() {
            if let Some(r) = pearson(&series[i], &series[j]) {
                matrix.insert((keys[i].clone(), keys[j].clone()), r);
                matrix.insert((keys[j].clone(), keys[i].clone()), r);
                out.push(PairCorrelation {
                    a: keys[i].clone(),
                    b: keys[j].clone(),
                    r,
                });
            }
        }
    }
    (out, matrix)
}

/// Pearson coefficient; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 1e-18 || syy <= 1e-18 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Greedy grouping: seeds are taken in decreasing contribution order and
/// absorb every unassigned pair correlated with them at or above `cutoff`.
fn clusters(current: &GammaResult, matrix: &CorrMatrix, cutoff: f64) -> Vec<Vec<PairKey>> {
    let mut order: Vec<(PairKey, f64)> = current
        .pair_contributions
        .iter()
        .map(|p| (p.key(), p.contribution))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut assigned: BTreeSet<PairKey> = BTreeSet::new();
    let mut out = Vec::new();
    for (seed, _) in &order {
        if assigned.contains(seed) {
            continue;
        }
        let mut group = vec![seed.clone()];
        for (other, _) in &order {
            if other == seed || assigned.contains(other) {
                continue;
            }
            if matrix
                .get(&(seed.clone(), other.clone()))
                .is_some_and(|r| *r >= cutoff)
            {
                group.push(other.clone());
            }
        }
        if group.len() > 1 {
            assigned.extend(group.iter().cloned());
            out.push(group);
        } else {
            assigned.insert(seed.clone());
        }
    }
    out
}

/// Highest-risk dimensions by radar value; ties broken by id.
pub fn top_dimensions(result: &GammaResult, dims: &[Dimension], n: usize) -> Vec<TopDimension> {
    let mut rows: Vec<(&String, f64)> = result.dimension_risk.iter().map(|(d, v)| (d, *v)).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    rows.into_iter()
        .take(n)
        .map(|(id, score)| TopDimension {
            dimension_id: id.clone(),
            label: dims
                .iter()
                .find(|d| &d.dimension_id == id)
                .map(|d| d.label.clone())
                .unwrap_or_else(|| id.clone()),
            score,
        })
        .collect()
}
