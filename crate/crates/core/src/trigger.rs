//! Boolean trigger expressions over profile and action fields, stored as a
//! JSON AST.
//!
//! ```json
//! { "all": [
//!     { "field": "level", "op": "eq", "value": "Medium" },
//!     { "field": "fact.verified_user", "op": "eq", "value": false }
//! ] }
//! ```
//!
//! Evaluation is total: a field that is absent from the profile or action
//! makes its comparison false.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AuraError, Result};
use crate::model::{to_percent_scale, ActionRecord, FactValue, RiskProfile, EPS};
use crate::profiling::{label, ThresholdPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    #[serde(alias = "==")]
    Eq,
    #[serde(alias = "!=")]
    Ne,
    #[serde(alias = "<")]
    Lt,
    #[serde(alias = "<=")]
    Le,
    #[serde(alias = ">")]
    Gt,
    #[serde(alias = ">=")]
    Ge,
    In,
    Contains,
}

impl CmpOp {
    fn symbol(&self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::In => "in",
            CmpOp::Contains => "contains",
        }
    }

    fn is_ordering(&self) -> bool {
        matches!(self, CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub field: String,
    pub op: CmpOp,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllOf {
    pub all: Vec<TriggerExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnyOf {
    pub any: Vec<TriggerExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Negation {
    pub not: Box<TriggerExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TriggerExpr {
    Const(bool),
    All(AllOf),
    Any(AnyOf),
    Not(Negation),
    Cmp(Comparison),
}

impl Default for TriggerExpr {
    fn default() -> Self {
        TriggerExpr::Const(true)
    }
}

/// Kinds of field a comparison may address.
#[derive(Debug, Clone, PartialEq)]
enum Field<'a> {
    GammaNorm,
    Number(&'a str),
    Level,
    Decision,
    Quadrant,
    Dimension(&'a str),
    DimensionLevel(&'a str),
    ContextShare(&'a str),
    DimensionShare(&'a str),
    Fact(&'a str),
    ActionText(&'a str),
}

fn parse_field(name: &str) -> Option<Field<'_>> {
    let prefixed = |p: &str| name.strip_prefix(p).filter(|rest| !rest.is_empty());
    if let Some(rest) = prefixed("dimension.") {
        return Some(Field::Dimension(rest));
    }
    if let Some(rest) = prefixed("dimension_level.") {
        return Some(Field::DimensionLevel(rest));
    }
    if let Some(rest) = prefixed("context_share.") {
        return Some(Field::ContextShare(rest));
    }
    if let Some(rest) = prefixed("dimension_share.") {
        return Some(Field::DimensionShare(rest));
    }
    if let Some(rest) = prefixed("fact.") {
        return Some(Field::Fact(rest));
    }
    match name {
        "gamma_norm" => Some(Field::GammaNorm),
        "gamma" | "u_total" | "variance" | "concentration" => Some(Field::Number(name)),
        "level" => Some(Field::Level),
        "decision" => Some(Field::Decision),
        "quadrant" => Some(Field::Quadrant),
        "action" | "intent" | "actor" | "data_sensitivity" | "action_id" => {
            Some(Field::ActionText(name))
        }
        _ => None,
    }
}

/// Inputs a trigger is evaluated against.
pub struct TriggerInput<'a> {
    pub profile: &'a RiskProfile,
    pub action: Option<&'a ActionRecord>,
    pub policy: &'a ThresholdPolicy,
}

#[derive(Debug, Clone, PartialEq)]
enum Operand {
    Num(f64),
    Text(String),
    Bool(bool),
    List(Vec<Operand>),
    /// Ordinal label: position in its ordering plus its text.
    Rank(usize, String),
}

impl Operand {
    fn from_fact(v: &FactValue) -> Operand {
        match v {
            FactValue::Bool(b) => Operand::Bool(*b),
            FactValue::Number(n) => Operand::Num(n.as_f64().unwrap_or(f64::NAN)),
            FactValue::Text(s) => Operand::Text(s.clone()),
            FactValue::List(xs) => Operand::List(xs.iter().map(Operand::from_fact).collect()),
        }
    }

    fn from_json(v: &Value) -> Option<Operand> {
        match v {
            Value::Bool(b) => Some(Operand::Bool(*b)),
            Value::Number(n) => n.as_f64().map(Operand::Num),
            Value::String(s) => Some(Operand::Text(s.clone())),
            Value::Array(xs) => xs.iter().map(Operand::from_json).collect::<Option<Vec<_>>>().map(Operand::List),
            _ => None,
        }
    }

    fn text(&self) -> Option<String> {
        match self {
            Operand::Text(s) | Operand::Rank(_, s) => Some(s.to_ascii_lowercase()),
            Operand::Bool(b) => Some(b.to_string()),
            _ => None,
        }
    }
}

fn loose_eq(a: &Operand, b: &Operand) -> bool {
    match (a, b) {
        (Operand::Num(x), Operand::Num(y)) => (x - y).abs() <= EPS,
        (Operand::Num(x), Operand::Text(s)) | (Operand::Text(s), Operand::Num(x)) => {
            s.trim().parse::<f64>().is_ok_and(|y| (x - y).abs() <= EPS)
        }
        (Operand::List(xs), Operand::List(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| loose_eq(x, y))
        }
        (Operand::List(_), _) | (_, Operand::List(_)) => false,
        _ => match (a.text(), b.text()) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    }
}

impl TriggerExpr {
    pub fn always() -> Self {
        TriggerExpr::Const(true)
    }

    pub fn cmp(field: &str, op: CmpOp, value: impl Into<Value>) -> Self {
        TriggerExpr::Cmp(Comparison {
            field: field.to_string(),
            op,
            value: value.into(),
        })
    }

    pub fn all(items: Vec<TriggerExpr>) -> Self {
        TriggerExpr::All(AllOf { all: items })
    }

    pub fn any(items: Vec<TriggerExpr>) -> Self {
        TriggerExpr::Any(AnyOf { any: items })
    }

    pub fn negate(item: TriggerExpr) -> Self {
        TriggerExpr::Not(Negation { not: Box::new(item) })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let expr: TriggerExpr = serde_json::from_value(value.clone())
            .map_err(|e| AuraError::InvalidInput(format!("trigger does not parse: {e}")))?;
        expr.validate()?;
        Ok(expr)
    }

    /// Checks field names and operand shapes.
    pub fn validate(&self) -> Result<()> {
        match self {
            TriggerExpr::Const(_) => Ok(()),
            TriggerExpr::All(a) => a.all.iter().try_for_each(TriggerExpr::validate),
            TriggerExpr::Any(a) => a.any.iter().try_for_each(TriggerExpr::validate),
            TriggerExpr::Not(n) => n.not.validate(),
            TriggerExpr::Cmp(c) => {
                let field = parse_field(&c.field)
                    .ok_or_else(|| AuraError::InvalidInput(format!("unknown trigger field '{}'", c.field)))?;
                let operand = Operand::from_json(&c.value).ok_or_else(|| {
                    AuraError::InvalidInput(format!("unsupported operand for '{}'", c.field))
                })?;
                if c.op == CmpOp::In && !matches!(operand, Operand::List(_)) {
                    return Err(AuraError::InvalidInput(format!("'in' on '{}' needs a list", c.field)));
                }
                if c.op.is_ordering() {
                    let ordinal = matches!(field, Field::Level | Field::Decision | Field::DimensionLevel(_));
                    let numeric_value = matches!(operand, Operand::Num(_));
                    if !ordinal && !numeric_value {
                        return Err(AuraError::InvalidInput(format!(
                            "'{}' on '{}' needs a number",
                            c.op.symbol(),
                            c.field
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn evaluate(&self, input: &TriggerInput<'_>) -> bool {
        match self {
            TriggerExpr::Const(b) => *b,
            TriggerExpr::All(a) => a.all.iter().all(|e| e.evaluate(input)),
            TriggerExpr::Any(a) => a.any.iter().any(|e| e.evaluate(input)),
            TriggerExpr::Not(n) => !n.not.evaluate(input),
            TriggerExpr::Cmp(c) => compare(c, input),
        }
    }

    /// Every field referenced by the expression.
    pub fn fields(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields(&self, out: &mut Vec<String>) {
        match self {
            TriggerExpr::Const(_) => {}
            TriggerExpr::All(a) => a.all.iter().for_each(|e| e.collect_fields(out)),
            TriggerExpr::Any(a) => a.any.iter().for_each(|e| e.collect_fields(out)),
            TriggerExpr::Not(n) => n.not.collect_fields(out),
            TriggerExpr::Cmp(c) => out.push(c.field.clone()),
        }
    }
}

impl fmt::Display for TriggerExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, xs: &[TriggerExpr], sep: &str| -> fmt::Result {
            f.write_str("(")?;
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    write!(f, " {sep} ")?;
                }
                write!(f, "{x}")?;
            }
            f.write_str(")")
        };
        match self {
            TriggerExpr::Const(b) => write!(f, "{b}"),
            TriggerExpr::All(a) => join(f, &a.all, "AND"),
            TriggerExpr::Any(a) => join(f, &a.any, "OR"),
            TriggerExpr::Not(n) => write!(f, "NOT {}", n.not),
            TriggerExpr::Cmp(c) => write!(f, "{} {} {}", c.field, c.op.symbol(), c.value),
        }
    }
}

fn level_rank(policy: &ThresholdPolicy, name: &str) -> Option<usize> {
    policy.labels.iter().position(|l| l.eq_ignore_ascii_case(name))
}

fn resolve(field: &Field<'_>, input: &TriggerInput<'_>) -> Option<Operand> {
    let p = input.profile;
    match field {
        Field::GammaNorm => Some(Operand::Num(p.gamma_norm)),
        Field::Number(name) => Some(Operand::Num(match *name {
            "gamma" => p.gamma,
            "u_total" => p.u_total,
            "variance" => p.uncertainty.variance,
            _ => p.uncertainty.concentration,
        })),
        Field::Level => level_rank(input.policy, &p.level).map(|r| Operand::Rank(r, p.level.clone())),
        Field::Decision => Some(Operand::Rank(p.decision as usize, p.decision.as_str().into())),
        Field::Quadrant => serde_json::to_value(p.quadrant)
            .ok()
            .and_then(|v| v.as_str().map(|s| Operand::Text(s.to_string()))),
        Field::Dimension(id) => p.breakdown.radar.get(*id).map(|v| Operand::Num(*v)),
        Field::DimensionLevel(id) => p.breakdown.radar.get(*id).map(|v| {
            let (name, _) = label(v * 100.0, input.policy);
            Operand::Rank(input.policy.band(v * 100.0), name)
        }),
        Field::ContextShare(id) => p.breakdown.context_shares.get(*id).map(|v| Operand::Num(*v)),
        Field::DimensionShare(id) => p.breakdown.dimension_shares.get(*id).map(|v| Operand::Num(*v)),
        Field::Fact(key) => input.action?.fact(key).map(Operand::from_fact),
        Field::ActionText(name) => {
            let a = input.action?;
            match *name {
                "action" => Some(Operand::Text(a.action.clone())),
                "intent" => Some(Operand::Text(a.intent.clone())),
                "actor" => Some(Operand::Text(a.actor.clone())),
                "action_id" => Some(Operand::Text(a.action_id.clone())),
                _ => a.data_sensitivity.map(|s| Operand::Text(s.as_str().into())),
            }
        }
    }
}

/// Rescales a literal onto the field's own scale.
fn literal(field: &Field<'_>, v: &Value, policy: &ThresholdPolicy) -> Option<Operand> {
    let op = Operand::from_json(v)?;
    Some(match (field, op) {
        (Field::GammaNorm, Operand::Num(x)) => Operand::Num(to_percent_scale(x).unwrap_or(x)),
        (Field::Dimension(_), Operand::Num(x)) if x > 1.0 => Operand::Num(x / 100.0),
        (Field::Level | Field::DimensionLevel(_), Operand::Text(s)) => match level_rank(policy, &s) {
            Some(r) => Operand::Rank(r, s),
            None => Operand::Text(s),
        },
        (Field::Decision, Operand::Text(s)) => match crate::model::Decision::parse(&s) {
            Some(d) => Operand::Rank(d as usize, s),
            None => Operand::Text(s),
        },
        (_, op) => op,
    })
}

fn compare(c: &Comparison, input: &TriggerInput<'_>) -> bool {
    let Some(field) = parse_field(&c.field) else {
        return false;
    };
    let Some(lhs) = resolve(&field, input) else {
        return false;
    };
    match c.op {
        CmpOp::In => match Operand::from_json(&c.value) {
            Some(Operand::List(xs)) => xs.iter().any(|x| {
                literal(&field, &json_of(x), input.policy)
                    .is_some_and(|rhs| loose_eq(&lhs, &rhs) || ranks_equal(&lhs, &rhs))
            }),
            _ => false,
        },
        CmpOp::Contains => {
            let Some(rhs) = Operand::from_json(&c.value) else {
                return false;
            };
            match &lhs {
                Operand::List(xs) => xs.iter().any(|x| loose_eq(x, &rhs)),
                Operand::Text(s) => rhs
                    .text()
                    .is_some_and(|needle| s.to_ascii_lowercase().contains(&needle)),
                _ => false,
            }
        }
        op => {
            let Some(rhs) = literal(&field, &c.value, input.policy) else {
                return false;
            };
            match op {
                CmpOp::Eq => loose_eq(&lhs, &rhs) || ranks_equal(&lhs, &rhs),
                CmpOp::Ne => !(loose_eq(&lhs, &rhs) || ranks_equal(&lhs, &rhs)),
                _ => ordered(&lhs, &rhs).is_some_and(|ord| match op {
                    CmpOp::Lt => ord.is_lt(),
                    CmpOp::Le => ord.is_le(),
                    CmpOp::Gt => ord.is_gt(),
                    _ => ord.is_ge(),
                }),
            }
        }
    }
}

fn json_of(op: &Operand) -> Value {
    match op {
        Operand::Num(x) => serde_json::json!(x),
        Operand::Text(s) | Operand::Rank(_, s) => Value::String(s.clone()),
        Operand::Bool(b) => Value::Bool(*b),
        Operand::List(xs) => Value::Array(xs.iter().map(json_of).collect()),
    }
}

fn ranks_equal(a: &Operand, b: &Operand) -> bool {
    matches!((a, b), (Operand::Rank(x, _), Operand::Rank(y, _)) if x == y)
}

fn ordered(a: &Operand, b: &Operand) -> Option<std::cmp::Ordering> {
    match (a, b) {
        (Operand::Num(x), Operand::Num(y)) => {
            if (x - y).abs() <= EPS {
                Some(std::cmp::Ordering::Equal)
            } else {
                x.partial_cmp(y)
            }
        }
        (Operand::Rank(x, _), Operand::Rank(y, _)) => Some(x.cmp(y)),
        _ => None,
    }
}
