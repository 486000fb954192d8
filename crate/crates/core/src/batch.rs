//! Batch assessment, batch input parsing and agent decomposition.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{AuraError, Result};
use crate::evaluator::CallCounts;
use crate::memory::MatchKind;
use crate::model::{ActionRecord, DataSensitivity, FactValue};
use crate::pipeline::{AssessOptions, Assessment, Engine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchFormat {
    Csv,
    Jsonl,
    Json,
}

impl BatchFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(BatchFormat::Csv),
            "jsonl" | "ndjson" => Some(BatchFormat::Jsonl),
            "json" => Some(BatchFormat::Json),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Some(BatchFormat::Csv),
            "jsonl" | "ndjson" => Some(BatchFormat::Jsonl),
            "json" => Some(BatchFormat::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl From<&AuraError> for RowError {
    fn from(e: &AuraError) -> Self {
        RowError {
            code: e.code().to_string(),
            message: e.to_string(),
            details: e.details(),
        }
    }
}

/// One parsed input row: the action or the reason it was rejected.
pub type ParsedRow = std::result::Result<ActionRecord, RowError>;

fn row_error(msg: String) -> RowError {
    RowError {
        code: "invalid-input".into(),
        message: msg,
        details: Value::Null,
    }
}

fn action_from_value(v: Value) -> ParsedRow {
    serde_json::from_value::<ActionRecord>(v).map_err(|e| row_error(e.to_string()))
}

/// Splits a batch document into rows. A malformed row becomes an error row;
/// only a document that cannot be read at all fails as a whole.
pub fn parse_batch(text: &str, format: BatchFormat) -> Result<Vec<ParsedRow>> {
    match format {
        BatchFormat::Json => {
            if text.trim().is_empty() {
                return Ok(Vec::new());
            }
            let v: Value = serde_json::from_str(text)?;
            match v {
                Value::Array(items) => Ok(items.into_iter().map(action_from_value).collect()),
                other => Ok(vec![action_from_value(other)]),
            }
        }
        BatchFormat::Jsonl => Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| match serde_json::from_str::<Value>(l) {
                Ok(v) => action_from_value(v),
                Err(e) => Err(row_error(e.to_string())),
            })
            .collect()),
        BatchFormat::Csv => parse_csv(text),
    }
}

fn csv_cell(raw: &str) -> Value {
    serde_json::from_str::<Value>(raw)
        .ok()
        .filter(|v| !v.is_string())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn parse_csv(text: &str) -> Result<Vec<ParsedRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| AuraError::InvalidInput(format!("csv header: {e}")))?
        .clone();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.push(Err(row_error(format!("csv: {e}"))));
                continue;
            }
        };
        if record.len() != headers.len() {
            out.push(Err(row_error(format!(
                "row has {} cells, header has {}",
                record.len(),
                headers.len()
            ))));
            continue;
        }
        let mut obj = Map::new();
        for (h, cell) in headers.iter().zip(record.iter()) {
            if cell.is_empty() {
                continue;
            }
            let v = match h {
                "action_id" | "action" | "intent" | "actor" | "data_sensitivity" | "timestamp" => {
                    Value::String(cell.to_string())
                }
                "context" => Value::Array(
                    cell.split([';', '|'])
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(|t| Value::String(t.to_string()))
                        .collect(),
                ),
                _ => csv_cell(cell),
            };
            obj.insert(h.to_string(), v);
        }
        out.push(action_from_value(Value::Object(obj)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessment: Option<Assessment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RowError>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchSummary {
    pub count: usize,
    pub errors: usize,
    pub levels: BTreeMap<String, usize>,
    pub decisions: BTreeMap<String, usize>,
    pub mean_gamma_norm: f64,
    pub evaluator_calls: CallCounts,
    pub memory_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchReport {
    pub results: Vec<BatchRow>,
    pub summary: BatchSummary,
}

fn add_counts(a: &mut CallCounts, b: &CallCounts) {
    a.parse_context += b.parse_context;
    a.propose_dimensions += b.propose_dimensions;
    a.score_pair += b.score_pair;
    a.propose_mitigations += b.propose_mitigations;
    a.generate_questions += b.generate_questions;
    a.total += b.total;
}

impl BatchReport {
    fn from_rows(results: Vec<BatchRow>) -> Self {
        let mut s = BatchSummary::default();
        let mut sum = 0.0;
        for r in &results {
            match &r.assessment {
                Some(a) => {
                    s.count += 1;
                    sum += a.profile.gamma_norm;
                    *s.levels.entry(a.profile.level.clone()).or_default() += 1;
                    *s.decisions.entry(a.final_decision.as_str().to_string()).or_default() += 1;
                    add_counts(&mut s.evaluator_calls, &a.evaluator_calls);
                    if a.memory.match_kind != MatchKind::None && a.memory.plan != "none" {
                        s.memory_hits += 1;
                    }
                }
                None => s.errors += 1,
            }
        }
        if s.count > 0 {
            s.mean_gamma_norm = sum / s.count as f64;
        }
        BatchReport { results, summary: s }
    }
}

/// Assesses rows in input order. With auto-save on the rows run one after
/// another so later rows can reuse earlier ones; otherwise they run on the
/// worker pool with trace ids assigned up front.
pub fn assess_batch(engine: &Engine, rows: Vec<ParsedRow>, opts: &AssessOptions) -> BatchReport {
    let cfg = engine.config();
    let sequential = opts.auto_save.unwrap_or(cfg.auto_save);
    let run = |index: usize, row: ParsedRow, o: &AssessOptions| -> BatchRow {
        match row {
            Ok(action) => {
                let action_id = Some(action.action_id.clone());
                match engine.assess(&action, o) {
                    Ok(a) => BatchRow {
                        index,
                        action_id,
                        assessment: Some(a),
                        error: None,
                    },
                    Err(e) => {
                        tracing::warn!(row = index, error = %e, "batch row failed");
                        BatchRow {
                            index,
                            action_id,
                            assessment: None,
                            error: Some(RowError::from(&e)),
                        }
                    }
                }
            }
            Err(e) => BatchRow {
                index,
                action_id: None,
                assessment: None,
                error: Some(e),
            },
        }
    };
    let results: Vec<BatchRow> = if sequential {
        rows.into_iter().enumerate().map(|(i, r)| run(i, r, opts)).collect()
    } else {
        let jobs: Vec<(usize, ParsedRow, AssessOptions)> = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut o = opts.clone();
                if r.is_ok() && o.trace_id.is_none() {
                    o.trace_id = Some(engine.next_id("trace"));
                }
                (i, r, o)
            })
            .collect();
        let work = || jobs.into_par_iter().map(|(i, r, o)| run(i, r, &o)).collect();
        if cfg.jobs > 0 {
            match rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build() {
                Ok(pool) => pool.install(work),
                Err(_) => work(),
            }
        } else {
            work()
        }
    };
    BatchReport::from_rows(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolEntry {
    Name(String),
    Spec(ToolSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub facts: BTreeMap<String, FactValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_sensitivity: Option<DataSensitivity>,
}

/// An agent described by the tools or capabilities it can invoke.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentSpec {
    #[serde(default, alias = "name", alias = "actor")]
    pub agent: String,
    #[serde(default)]
    pub tools: Vec<ToolEntry>,
    #[serde(default)]
    pub capabilities: Vec<ToolEntry>,
}

/// One action per distinct tool or capability, first declaration wins.
pub fn decompose_agent(spec: &AgentSpec) -> Result<Vec<ActionRecord>> {
    let actor = if spec.agent.trim().is_empty() {
        "agent"
    } else {
        spec.agent.trim()
    };
    let mut out: Vec<ActionRecord> = Vec::new();
    for entry in spec.tools.iter().chain(&spec.capabilities) {
        let tool = match entry {
            ToolEntry::Name(n) => ToolSpec {
                name: n.clone(),
                intent: None,
                description: None,
                context: Vec::new(),
                facts: BTreeMap::new(),
                data_sensitivity: None,
            },
            ToolEntry::Spec(s) => s.clone(),
        };
        let name = tool.name.trim();
        if name.is_empty() {
            return Err(AuraError::InvalidInput("tool with an empty name".into()));
        }
        if out.iter().any(|a| a.action == name) {
            continue;
        }
        let intent = tool.intent.clone().unwrap_or_else(|| name.to_string());
        let mut a = ActionRecord::new(name, &intent, actor);
        a.context_facts = tool.facts.clone();
        if !tool.context.is_empty() {
            let tags: Vec<&str> = tool.context.iter().map(String::as_str).collect();
            a = a.with_tags(&tags);
        }
        a.data_sensitivity = tool.data_sensitivity;
        a.action_id = a.derived_id();
        out.push(a);
    }
    if out.is_empty() {
        return Err(AuraError::EmptySpec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EngineConfig;

    #[test]
    fn csv_rows_and_errors() {
        let text = "action_id,action,intent,actor,context,verified_user\n\
                    a1,submit_form,account_signup,web_agent,untrusted_domain;evening,false\n\
                    a2,,x,y,,\n\
                    a3,send_email,notify,mailer,,true\n";
        let rows = parse_batch(text, BatchFormat::Csv).unwrap();
        assert_eq!(rows.len(), 3);
        let a1 = rows[0].as_ref().unwrap();
        assert_eq!(a1.action_id, "a1");
        assert_eq!(a1.fact("verified_user"), Some(&FactValue::Bool(false)));
        assert_eq!(
            a1.fact("context"),
            Some(&FactValue::List(vec!["untrusted_domain".into(), "evening".into()]))
        );
        assert!(rows[1].is_err());
        assert!(rows[2].is_ok());
    }

    #[test]
    fn jsonl_and_json() {
        let jsonl = "{\"action\":\"a\",\"intent\":\"i\",\"actor\":\"x\"}\n\nnot json\n";
        let rows = parse_batch(jsonl, BatchFormat::Jsonl).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].is_ok() && rows[1].is_err());
        assert!(parse_batch("", BatchFormat::Json).unwrap().is_empty());
        assert!(parse_batch("", BatchFormat::Csv).unwrap().is_empty());
        let arr = parse_batch("[{\"action\":\"a\"},{\"intent\":\"no action\"}]", BatchFormat::Json).unwrap();
        assert!(arr[0].is_ok() && arr[1].is_err());
    }

    #[test]
    fn decompose_dedupes_and_rejects_empty() {
        let spec: AgentSpec = serde_json::from_str(
            r#"{"agent":"bot","tools":["search","fetch",{"name":"search","intent":"other"}],"capabilities":["summarise"]}"#,
        )
        .unwrap();
        let actions = decompose_agent(&spec).unwrap();
        let names: Vec<_> = actions.iter().map(|a| a.action.as_str()).collect();
        assert_eq!(names, vec!["search", "fetch", "summarise"]);
        assert!(actions.iter().all(|a| a.actor == "bot"));
        assert!(matches!(decompose_agent(&AgentSpec::default()), Err(AuraError::EmptySpec)));
    }

    #[test]
    fn empty_batch_has_zero_stats() {
        let engine = Engine::builder(EngineConfig::default()).build().unwrap();
        let report = assess_batch(&engine, Vec::new(), &AssessOptions::default());
        assert!(report.results.is_empty());
        assert_eq!(report.summary, BatchSummary::default());
    }
}
