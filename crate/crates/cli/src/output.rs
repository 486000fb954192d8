//! Rendering of result documents as JSON, terminal tables or CSV.

use serde_json::{Map, Value};

use aura_core::{AuraError, Result};

/// A command result. `view` is a flatter projection used for tables and
/// CSV; JSON always carries the full `doc`.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub doc: Value,
    pub view: Option<Value>,
}

impl Output {
    pub fn new(doc: Value) -> Self {
        Output { doc, view: None }
    }

    pub fn with_view(mut self, view: Value) -> Self {
        self.view = Some(view);
        self
    }

    pub fn tabular(&self) -> &Value {
        self.view.as_ref().unwrap_or(&self.doc)
    }
}

pub fn json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values always serialise");
    s.push('\n');
    s
}

const CELL_MAX: usize = 48;

fn cell(v: &Value, truncate: bool) -> String {
    let s = match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Bool(_) | Value::Number(_) => v.to_string(),
        Value::Array(xs) if xs.iter().all(|x| !x.is_object() && !x.is_array()) => {
            xs.iter().map(|x| cell(x, false)).collect::<Vec<_>>().join(", ")
        }
        other => other.to_string(),
    };
    if truncate && s.chars().count() > CELL_MAX {
        let mut t: String = s.chars().take(CELL_MAX - 1).collect();
        t.push('…');
        t
    } else {
        s
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn columns(rows: &[Value]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for r in rows {
        if let Value::Object(m) = r {
            for k in m.keys() {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
    }
    cols
}

fn grid(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn table(v: &Value) -> String {
    match v {
        Value::Array(rows) if rows.is_empty() => "(none)\n".into(),
        Value::Array(rows) if rows.iter().all(Value::is_object) => {
            let cols = columns(rows);
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| cols.iter().map(|c| cell(&r[c], true)).collect())
                .collect();
            grid(&cols, &body)
        }
        Value::Object(_) => {
            let mut pairs = Vec::new();
            flatten("", v, &mut pairs);
            let body: Vec<Vec<String>> = pairs.iter().map(|(k, x)| vec![k.clone(), cell(x, false)]).collect();
            grid(&["field".into(), "value".into()], &body)
        }
        Value::Array(xs) => xs.iter().map(|x| format!("{}\n", cell(x, false))).collect(),
        other => format!("{}\n", cell(other, false)),
    }
}

pub fn csv(v: &Value) -> Result<String> {
    let rows: Vec<Map<String, Value>> = match v {
        Value::Array(xs) => xs
            .iter()
            .map(|x| match x {
                Value::Object(m) => Ok(m.clone()),
                _ => Err(AuraError::InvalidInput("csv output needs a list of records".into())),
            })
            .collect::<Result<_>>()?,
        Value::Object(m) => vec![m.clone()],
        _ => return Err(AuraError::InvalidInput("csv output needs records".into())),
    };
    let as_values: Vec<Value> = rows.iter().cloned().map(Value::Object).collect();
    let cols = columns(&as_values);
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| AuraError::Storage(format!("csv: {e}"));
    w.write_record(&cols).map_err(fail)?;
    for r in &rows {
        let rec: Vec<String> = cols.iter().map(|c| cell(r.get(c).unwrap_or(&Value::Null), false)).collect();
        w.write_record(&rec).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| AuraError::Storage(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| AuraError::Storage(e.to_string()))
}
