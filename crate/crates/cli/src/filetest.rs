//! `file test`: compares batch assessments with annotated expectations.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use aura_core::batch::{BatchFormat, BatchReport};
use aura_core::model::to_percent_scale;
use aura_core::{AuraError, Result};

/// Allowed gap between expected and produced gamma_norm (0–100 scale).
pub const GAMMA_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Expectation {
    pub action_id: String,
    #[serde(default)]
    pub level: Option<String>,
    #[serde(default)]
    pub decision: Option<String>,
    /// Either scale.
    #[serde(default)]
    pub gamma_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub field: String,
    pub expected: Value,
    pub actual: Value,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestRow {
    pub action_id: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub rows: Vec<TestRow>,
    /// Rows that reached a comparison.
    pub comparisons: usize,
    pub passed: usize,
    pub failed: usize,
    pub errors: usize,
    /// `passed / comparisons`, absent when nothing was compared.
    pub accuracy: Option<f64>,
}

pub fn parse_expected(text: &str, format: BatchFormat) -> Result<Vec<Expectation>> {
    match format {
        BatchFormat::Csv => {
            let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
            r.deserialize()
                .map(|row| row.map_err(|e| AuraError::InvalidInput(format!("expected file: {e}"))))
                .collect()
        }
        BatchFormat::Jsonl => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| AuraError::InvalidInput(format!("expected file line {}: {e}", i + 1)))
            })
            .collect(),
        BatchFormat::Json => {
            if text.trim().is_empty() {
                return Ok(Vec::new());
            }
            serde_json::from_str(text).map_err(|e| AuraError::InvalidInput(format!("expected file: {e}")))
        }
    }
}

fn check(field: &str, expected: Value, actual: Value, pass: bool) -> Check {
    Check {
        field: field.into(),
        expected,
        actual,
        pass,
    }
}

pub fn compare(report: &BatchReport, expected: &[Expectation]) -> TestReport {
    let mut rows = Vec::new();
    for exp in expected {
        let found = report
            .results
            .iter()
            .find(|r| r.action_id.as_deref() == Some(exp.action_id.as_str()));
        let failure = |msg: String| TestRow {
            action_id: exp.action_id.clone(),
            pass: false,
            checks: Vec::new(),
            error: Some(msg),
        };
        let Some(row) = found else {
            rows.push(failure("no input row with this action_id".into()));
            continue;
        };
        let Some(a) = &row.assessment else {
            let msg = row.error.as_ref().map(|e| e.message.clone()).unwrap_or_default();
            rows.push(failure(format!("assessment failed: {msg}")));
            continue;
        };
        let p = &a.profile;
        let mut checks = Vec::new();
        if let Some(l) = &exp.level {
            checks.push(check("level", json!(l), json!(p.level), l.eq_ignore_ascii_case(&p.level)));
        }
        if let Some(d) = &exp.decision {
            let got = p.decision.as_str();
            checks.push(check("decision", json!(d), json!(got), d.eq_ignore_ascii_case(got)));
        }
        if let Some(g) = exp.gamma_norm {
            let pass = to_percent_scale(g).is_some_and(|want| (want - p.gamma_norm).abs() <= GAMMA_TOLERANCE);
            checks.push(check("gamma_norm", json!(g), json!(p.gamma_norm), pass));
        }
        rows.push(TestRow {
            action_id: exp.action_id.clone(),
            pass: checks.iter().all(|c| c.pass),
            checks,
            error: None,
        });
    }
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    let comparisons = rows.len() - errors;
    let passed = rows.iter().filter(|r| r.pass).count();
    TestReport {
        comparisons,
        passed,
        failed: comparisons - passed,
        errors,
        accuracy: (comparisons > 0).then(|| passed as f64 / comparisons as f64),
        rows,
    }
}
