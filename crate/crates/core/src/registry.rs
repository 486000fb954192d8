//! Versioned dimension catalogue and the tier-proportional budget allocator.

use std::collections::{BTreeMap, BTreeSet};

use semver::Version;
use serde::{Deserialize, Serialize};

use crate::error::{AuraError, Result};
use crate::model::{slug, Dimension, Tier, EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangelogEntry {
    pub version: Version,
    pub note: String,
}

/// Immutable snapshot of the dimension catalogue. Edits produce a new
/// version through [`DimensionCatalogue::revise`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionCatalogue {
    pub version: Version,
    pub entries: Vec<Dimension>,
    pub tier_budgets: BTreeMap<Tier, f64>,
    /// Normalized label -> catalogue dimension id.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    #[serde(default)]
    pub changelog: Vec<ChangelogEntry>,
}

#[derive(Debug, Clone)]
pub enum CatalogueEdit {
    Add(Dimension),
    Remove(String),
    SetTierBudgets(BTreeMap<Tier, f64>),
    AddAlias { alias: String, dimension_id: String },
}

const CORE: &[(&str, &str, &str)] = &[
    (
        "accountability-governance",
        "Accountability / Governance",
        "Clear ownership of the action and of its consequences.",
    ),
    (
        "transparency-explicability",
        "Transparency / Explicability",
        "Whether the action and its rationale can be inspected and explained.",
    ),
    (
        "fairness-bias",
        "Fairness / Bias",
        "Risk of discriminatory or unequal treatment.",
    ),
    (
        "privacy-data-protection",
        "Privacy / Data Protection",
        "Exposure, collection or transfer of personal data.",
    ),
    (
        "human-oversight-autonomy",
        "Autonomy",
        "Degree to which the action bypasses human control or consent of the principal.",
    ),
    ("security", "Security", "Attack surface and integrity of systems touched."),
    (
        "robustness-reliability",
        "Robustness / Reliability",
        "Likelihood of failure or erroneous execution.",
    ),
    (
        "auditability-traceability",
        "Auditability / Traceability",
        "Whether the action leaves a reconstructible record.",
    ),
    (
        "lifecycle-risk-impact",
        "Lifecycle Risk & Impact",
        "Downstream and long-term impact of the action.",
    ),
    (
        "legal-rights-alignment",
        "Legal & Rights Alignment",
        "Conformity with law, regulation and fundamental rights.",
    ),
];

const ALIASES: &[(&str, &str)] = &[
    ("accountability", "accountability-governance"),
    ("governance", "accountability-governance"),
    ("transparency", "transparency-explicability"),
    ("explicability", "transparency-explicability"),
    ("explainability", "transparency-explicability"),
    ("interpretability", "transparency-explicability"),
    ("fairness", "fairness-bias"),
    ("bias", "fairness-bias"),
    ("non-discrimination", "fairness-bias"),
    ("privacy", "privacy-data-protection"),
    ("data-protection", "privacy-data-protection"),
    ("data-governance", "privacy-data-protection"),
    ("human-oversight", "human-oversight-autonomy"),
    ("oversight", "human-oversight-autonomy"),
    ("autonomy", "human-oversight-autonomy"),
    ("cybersecurity", "security"),
    ("robustness", "robustness-reliability"),
    ("reliability", "robustness-reliability"),
    ("auditability", "auditability-traceability"),
    ("traceability", "auditability-traceability"),
    ("lifecycle", "lifecycle-risk-impact"),
    ("risk-impact", "lifecycle-risk-impact"),
    ("legal", "legal-rights-alignment"),
    ("rights", "legal-rights-alignment"),
    ("legal-alignment", "legal-rights-alignment"),
];

/// The consensus core set with default tier budgets 50/40/10.
pub fn seed_core_catalogue() -> DimensionCatalogue {
    DimensionCatalogue {
        version: Version::new(1, 0, 0),
        entries: CORE
            .iter()
            .map(|(id, label, desc)| Dimension::new(id, label, Tier::Core).describe(desc))
            .collect(),
        tier_budgets: default_tier_budgets(),
        aliases: ALIASES
            .iter()
            .map(|(a, d)| (a.to_string(), d.to_string()))
            .collect(),
        changelog: vec![ChangelogEntry {
            version: Version::new(1, 0, 0),
            note: "seed core catalogue".into(),
        }],
    }
}

pub fn default_tier_budgets() -> BTreeMap<Tier, f64> {
    BTreeMap::from([(Tier::Core, 0.5), (Tier::Field, 0.4), (Tier::Action, 0.1)])
}

/// Case-fold and hyphenate a dimension label.
pub fn normalize_label(label: &str) -> String {
    slug(label)
}

impl DimensionCatalogue {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.tier_budgets.values().sum();
        if (sum - 1.0).abs() > EPS {
            return Err(AuraError::InvalidInput(format!(
                "tier budgets sum to {sum}, expected 1"
            )));
        }
        if self.tier_budgets.values().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(AuraError::InvalidInput("tier budget outside [0,1]".into()));
        }
        if !self.entries.iter().any(|d| d.tier == Tier::Core) {
            return Err(AuraError::NoCoreDimensions);
        }
        let mut ids = BTreeSet::new();
        for d in &self.entries {
            if !ids.insert(&d.dimension_id) {
                return Err(AuraError::InvalidInput(format!(
                    "duplicate dimension '{}'",
                    d.dimension_id
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Dimension> {
        self.entries.iter().find(|d| d.dimension_id == id)
    }

    pub fn core(&self) -> Vec<Dimension> {
        self.entries
            .iter()
            .filter(|d| d.tier == Tier::Core)
            .cloned()
            .collect()
    }

    /// Resolves a free-form label to a catalogue id through ids and aliases.
    pub fn resolve(&self, label: &str) -> Option<&str> {
        let norm = normalize_label(label);
        if let Some(d) = self.entries.iter().find(|d| d.dimension_id == norm) {
            return Some(&d.dimension_id);
        }
        if let Some(d) = self
            .entries
            .iter()
            .find(|d| normalize_label(&d.label) == norm)
        {
            return Some(&d.dimension_id);
        }
        self.aliases
            .get(&norm)
            .filter(|id| self.get(id).is_some())
            .map(String::as_str)
    }

    /// Returns a new catalogue version with the edit applied and recorded in
    /// the changelog. `self` is left untouched.
    pub fn revise(&self, edit: CatalogueEdit, note: &str) -> Result<DimensionCatalogue> {
        let mut next = self.clone();
        let mut version = self.version.clone();
        match edit {
            CatalogueEdit::Add(d) => {
                if next.get(&d.dimension_id).is_some() {
                    return Err(AuraError::Duplicate {
                        duplicate_of: d.dimension_id,
                    });
                }
                next.entries.push(d);
                version = Version::new(version.major, version.minor + 1, 0);
            }
            CatalogueEdit::Remove(id) => {
                let before = next.entries.len();
                next.entries.retain(|d| d.dimension_id != id);
                if next.entries.len() == before {
                    return Err(AuraError::not_found("dimension", id));
                }
                next.aliases.retain(|_, target| *target != id);
                version = Version::new(version.major + 1, 0, 0);
            }
            CatalogueEdit::SetTierBudgets(b) => {
                next.tier_budgets = b;
                version = Version::new(version.major, version.minor + 1, 0);
            }
            CatalogueEdit::AddAlias { alias, dimension_id } => {
                if next.get(&dimension_id).is_none() {
                    return Err(AuraError::not_found("dimension", dimension_id));
                }
                next.aliases.insert(normalize_label(&alias), dimension_id);
                version = Version::new(version.major, version.minor, version.patch + 1);
            }
        }
        next.version = version.clone();
        next.changelog.push(ChangelogEntry {
            version,
            note: note.to_string(),
        });
        next.validate()?;
        Ok(next)
    }
}

/// Splits `total` across the active dimensions: each tier's budget fraction
/// is shared equally by that tier's active dimensions, and the fractions of
/// empty tiers are redistributed proportionally over the non-empty ones.
pub fn allocate_tier_budgets(
    catalogue: &DimensionCatalogue,
    active_dims: &[Dimension],
    total: f64,
) -> Result<BTreeMap<String, f64>> {
    if !active_dims.iter().any(|d| d.tier == Tier::Core) {
        return Err(AuraError::NoCoreDimensions);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(AuraError::InvalidInput(format!("total budget {total} must be positive")));
    }
    let mut counts: BTreeMap<Tier, usize> = BTreeMap::new();
    for d in active_dims {
        *counts.entry(d.tier).or_default() += 1;
    }
    let live: f64 = Tier::ALL
        .iter()
        .filter(|t| counts.contains_key(t))
        .map(|t| catalogue.tier_budgets.get(t).copied().unwrap_or(0.0))
        .sum();
    let mut out = BTreeMap::new();
    for d in active_dims {
        let fraction = catalogue.tier_budgets.get(&d.tier).copied().unwrap_or(0.0);
        let share = if live > 0.0 {
            fraction / live
        } else {
            // every live tier has a zero budget: fall back to an even split
            1.0 / counts.len() as f64
        };
        out.insert(d.dimension_id.clone(), total * share / counts[&d.tier] as f64);
    }
    Ok(out)
}

/// Merges runtime proposals into the catalogue's core set. Proposals are
/// deduplicated by normalized label; a proposal resolving to a catalogue
/// entry is dropped in favour of that entry. Core-tier proposals are ignored.
pub fn merge_runtime_dimensions(
    catalogue: &DimensionCatalogue,
    proposed: &[Dimension],
) -> Vec<Dimension> {
    let mut merged = catalogue.core();
    let mut seen: BTreeSet<String> = merged.iter().map(|d| d.dimension_id.clone()).collect();
    for p in proposed {
        if p.tier == Tier::Core {
            continue;
        }
        if let Some(id) = catalogue
            .resolve(&p.dimension_id)
            .or_else(|| catalogue.resolve(&p.label))
        {
            let id = id.to_string();
            if seen.insert(id.clone()) {
                if let Some(d) = catalogue.get(&id) {
                    merged.push(d.clone());
                }
            }
            continue;
        }
        let id = normalize_label(&p.dimension_id);
        if seen.insert(id.clone()) {
            let mut d = p.clone();
            d.dimension_id = id;
            merged.push(d);
        }
    }
    merged
}
