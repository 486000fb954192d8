use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::{json, Value};

use aura_core::a2h::{self, MitigationOp};
use aura_core::batch::{assess_batch, decompose_agent, parse_batch, AgentSpec, BatchFormat, BatchReport};
use aura_core::hitl::{Answer, SessionStatus};
use aura_core::home::Home;
use aura_core::memory::{EntryPatch, MemoryBackend, MemoryEntry, MemoryExport};
use aura_core::mitigation::{parse_ttl, Mitigation};
use aura_core::model::{validate_action, FactValue};
use aura_core::pipeline::Assessment;
use aura_core::remote::RemoteMemoryStore;
use aura_core::trace::Actor;
use aura_core::{ActionRecord, AssessOptions, AuraError, Engine, EngineConfig, Result};

use crate::args::{
    ActionCmd, AgentCmd, ConfigCmd, FileCmd, Format, GlobalOpts, HitlCmd, MemoryCmd, MitigationCmd, Resource,
    SystemCmd,
};
use crate::filetest::{compare, parse_expected};
use crate::input::{read_text, Source};
use crate::output::Output;

/// Process-level inputs of one invocation.
pub struct Env {
    pub home: Home,
    pub stdin: Box<dyn FnMut() -> Result<String>>,
    /// Asks a yes/no question; `None` when stdin is not a terminal.
    pub prompt: Option<Box<dyn FnMut(&str) -> bool>>,
    /// Human actor recorded for edits.
    pub operator: String,
    /// Bearer token for a remote memory service.
    pub token: Option<String>,
}

impl Env {
    /// Non-interactive environment over `home` with empty stdin.
    pub fn new(home: Home) -> Self {
        Env {
            home,
            stdin: Box::new(|| Ok(String::new())),
            prompt: None,
            operator: "cli".into(),
            token: None,
        }
    }

    fn actor(&self) -> Actor {
        Actor::human(&self.operator)
    }

    fn read(&mut self, src: &Source) -> Result<String> {
        read_text(src, &mut self.stdin)
    }

    fn confirm(&mut self, yes: bool, question: &str) -> Result<()> {
        if yes {
            return Ok(());
        }
        match self.prompt.as_mut().map(|ask| ask(question)) {
            Some(true) => Ok(()),
            Some(false) => Err(AuraError::Precondition("cancelled".into())),
            None => Err(AuraError::Precondition(format!("{question} needs confirmation; pass --yes"))),
        }
    }
}

fn open_engine(env: &Env) -> Result<Engine> {
    let cfg = env.home.load_config()?;
    let remote: Option<Arc<dyn MemoryBackend>> = match &cfg.memory.url {
        Some(url) => Some(Arc::new(RemoteMemoryStore::connect(url, env.token.clone())?)),
        None => None,
    };
    env.home.open_engine(cfg, remote)
}

fn to_doc<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn assess_opts(g: &GlobalOpts) -> AssessOptions {
    AssessOptions {
        verbose: g.verbose.then_some(true),
        think: g.think.then_some(true),
        force_rescore: g.force,
        ..Default::default()
    }
}

pub fn execute(resource: &Resource, g: &GlobalOpts, env: &mut Env) -> Result<Output> {
    match resource {
        Resource::Agent { cmd } => agent(cmd, g, env),
        Resource::Action { cmd } => action(cmd, g, env),
        Resource::Mitigation { cmd } => mitigation(cmd, g, env),
        Resource::File { cmd } => file(cmd, g, env),
        Resource::Config { cmd } => config(cmd, env),
        Resource::Memory { cmd } => memory(cmd, g, env),
        Resource::System { cmd } => system(cmd, env),
        Resource::Hitl { cmd } => hitl(cmd, env),
    }
}

/// Runs `f` on an engine and persists its state afterwards.
fn with_engine(env: &mut Env, f: impl FnOnce(&Engine, &mut Env) -> Result<Output>) -> Result<Output> {
    let engine = open_engine(env)?;
    let out = f(&engine, env);
    env.home.save_state(&engine)?;
    out
}

fn parse_action(text: &str) -> Result<ActionRecord> {
    serde_json::from_str(text).map_err(|e| AuraError::InvalidInput(format!("action record: {e}")))
}

/// Saved entry by entry id, or the newest entry for an action id.
fn saved_entry(engine: &Engine, id: &str) -> Result<MemoryEntry> {
    if let Ok(e) = engine.memory().get(id) {
        return Ok(e);
    }
    engine
        .memory()
        .list()?
        .into_iter()
        .filter(|e| e.action_snapshot.action_id == id)
        .max_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.entry_id.cmp(&b.entry_id)))
        .ok_or_else(|| AuraError::not_found("action", id))
}

fn load_action(engine: &Engine, arg: &str, env: &mut Env) -> Result<ActionRecord> {
    match Source::classify(arg) {
        Source::Id(id) => Ok(saved_entry(engine, &id)?.action_snapshot),
        src => parse_action(&env.read(&src)?),
    }
}

fn assessment_view(a: &Assessment) -> Value {
    let p = &a.profile;
    let top: Vec<String> = p
        .top_dimensions
        .iter()
        .map(|t| format!("{} {:.2}", t.label, t.score))
        .collect();
    json!({
        "action_id": p.action_id,
        "status": a.status,
        "gamma_norm": p.gamma_norm,
        "level": p.level,
        "decision": p.decision,
        "final_decision": a.final_decision,
        "top_dimensions": top,
        "mitigation_id": p.mitigation_id,
        "mitigation_steps": p.mitigation_steps,
        "memory": a.memory.match_kind,
        "hitl_session_id": a.hitl_session_id,
        "trace_id": p.trace_id,
    })
}

fn assessment_output(a: &Assessment) -> Result<Output> {
    Ok(Output::new(to_doc(a)?).with_view(assessment_view(a)))
}

fn entry_row(e: &MemoryEntry) -> Value {
    let profile = e.assessment.as_ref().map(|s| &s.profile);
    json!({
        "entry_id": e.entry_id,
        "action_id": e.action_snapshot.action_id,
        "action": e.action_snapshot.action,
        "intent": e.action_snapshot.intent,
        "gamma_norm": e.global_gamma.gamma_norm,
        "level": profile.map(|p| p.level.clone()),
        "decision": profile.map(|p| p.decision),
        "mitigations": e.mitigation_ids,
        "status": e.status,
        "created_at": e.created_at,
    })
}

fn agent_spec(arg: &str, env: &mut Env) -> Result<AgentSpec> {
    let text = match Source::classify(arg) {
        Source::Id(id) => {
            let path = env.home.path("agents").join(format!("{id}.json"));
            std::fs::read_to_string(&path).map_err(|_| AuraError::not_found("agent", id))?
        }
        src => env.read(&src)?,
    };
    serde_json::from_str(&text).map_err(|e| AuraError::InvalidInput(format!("agent spec: {e}")))
}

fn agent(cmd: &AgentCmd, g: &GlobalOpts, env: &mut Env) -> Result<Output> {
    match cmd {
        AgentCmd::Actions { agent } => {
            let spec = agent_spec(agent, env)?;
            let actions = decompose_agent(&spec)?;
            let view: Vec<Value> = actions
                .iter()
                .map(|a| json!({"action_id": a.action_id, "action": a.action, "intent": a.intent}))
                .collect();
            Ok(Output::new(to_doc(&actions)?).with_view(Value::Array(view)))
        }
        AgentCmd::Assess { agent } => {
            let spec = agent_spec(agent, env)?;
            let actions = decompose_agent(&spec)?;
            with_engine(env, |engine, _| {
                let report = assess_batch(engine, actions.into_iter().map(Ok).collect(), &assess_opts(g));
                batch_output(&report)
            })
        }
    }
}

fn batch_output(report: &BatchReport) -> Result<Output> {
    let view: Vec<Value> = report
        .results
        .iter()
        .map(|r| match &r.assessment {
            Some(a) => {
                let mut v = assessment_view(a);
                v["index"] = json!(r.index);
                v
            }
            None => json!({
                "index": r.index,
                "action_id": r.action_id,
                "error": r.error.as_ref().map(|e| e.message.clone()),
            }),
        })
        .collect();
    Ok(Output::new(to_doc(report)?).with_view(Value::Array(view)))
}

fn patch_from_fields(engine: &Engine, entry: &MemoryEntry, fields: &[String]) -> Result<EntryPatch> {
    let mut patch = EntryPatch::default();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| AuraError::InvalidInput(format!("--field '{f}' is not k=v")))?;
        let v = v.trim();
        match k.trim() {
            "status" => patch.status = Some(v.into()),
            "notes" => patch.notes = Some(v.into()),
            "ttl" if v.is_empty() || v == "none" => patch.clear_ttl = true,
            "ttl" => patch.ttl = Some(parse_when(engine.now(), v)?),
            "hitl_required" => {
                patch.hitl_required = Some(
                    v.parse()
                        .map_err(|_| AuraError::InvalidInput(format!("hitl_required '{v}' is not true|false")))?,
                )
            }
            "mitigations" => patch.mitigation_ids = Some(split_list(v)),
            "context" => {
                let mut snap = entry.action_snapshot.clone();
                let tags = split_list(v).into_iter().map(FactValue::Text).collect();
                snap.context_facts.insert("context".into(), FactValue::List(tags));
                patch.action_embedding = Some(engine.embedder().embed(&snap));
                patch.action_snapshot = Some(snap);
            }
            other => {
                return Err(AuraError::InvalidInput(format!(
                    "unknown field '{other}' (status, notes, context, ttl, hitl_required, mitigations)"
                )))
            }
        }
    }
    Ok(patch)
}

fn split_list(v: &str) -> Vec<String> {
    v.split([',', ';', '|'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// RFC 3339 instant, or a duration such as `180d` from now.
fn parse_when(now: DateTime<Utc>, v: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(v) {
        return Ok(t.with_timezone(&Utc));
    }
    Ok(now + parse_ttl(v)?)
}

fn action(cmd: &ActionCmd, g: &GlobalOpts, env: &mut Env) -> Result<Output> {
    match cmd {
        ActionCmd::Assess { action } => with_engine(env, |engine, env| {
            let record = load_action(engine, action, env)?;
            assessment_output(&engine.assess(&record, &assess_opts(g))?)
        }),
        ActionCmd::Mitigate { action, apply } => with_engine(env, |engine, env| {
            let record = load_action(engine, action, env)?;
            let opts = AssessOptions {
                apply: *apply,
                ..assess_opts(g)
            };
            let a = engine.assess(&record, &opts)?;
            let mut out = assessment_output(&a)?;
            if let Some(view) = out.view.as_mut() {
                view["applied"] = json!(a.execution.is_some());
                if let Some(x) = &a.execution {
                    view["execution_decision"] = json!(x.final_decision);
                }
            }
            Ok(out)
        }),
        ActionCmd::Save { action } => with_engine(env, |engine, env| {
            let record = load_action(engine, action, env)?;
            let opts = AssessOptions {
                auto_save: Some(true),
                ..assess_opts(g)
            };
            let mut a = engine.assess(&record, &opts)?;
            if let Some(dup) = a.memory.duplicate_of.clone() {
                if !g.force {
                    return Err(AuraError::Duplicate { duplicate_of: dup });
                }
                a2h::delete_instance(&engine.a2h(None), &env.actor(), &dup)?;
                a = engine.assess(
                    &record,
                    &AssessOptions {
                        force_rescore: true,
                        ..opts
                    },
                )?;
            }
            let doc = json!({
                "saved": a.memory.saved_entry_id.is_some(),
                "entry_id": a.memory.saved_entry_id,
                "assessment": to_doc(&a)?,
            });
            Ok(Output::new(doc).with_view(assessment_view(&a)))
        }),
        ActionCmd::Validate { action } => {
            let record = match Source::classify(action) {
                Source::Id(_) => {
                    let engine = open_engine(env)?;
                    load_action(&engine, action, env)?
                }
                src => parse_action(&env.read(&src)?)?,
            };
            let violations = validate_action(&record);
            if !violations.is_empty() {
                return Err(AuraError::Validation(violations));
            }
            Ok(Output::new(json!({ "valid": true, "action_id": record.action_id, "action": record })))
        }
        ActionCmd::List => {
            let engine = open_engine(env)?;
            let rows: Vec<Value> = engine.memory().list()?.iter().map(entry_row).collect();
            Ok(Output::new(Value::Array(rows)))
        }
        ActionCmd::Show { action_id } => {
            let engine = open_engine(env)?;
            let e = saved_entry(&engine, action_id)?;
            Ok(Output::new(to_doc(&e)?).with_view(entry_row(&e)))
        }
        ActionCmd::Update { action_id, fields } => with_engine(env, |engine, env| {
            let e = saved_entry(engine, action_id)?;
            let patch = patch_from_fields(engine, &e, fields)?;
            let updated = a2h::update_instance(&engine.a2h(None), &env.actor(), &e.entry_id, &patch)?;
            Ok(Output::new(to_doc(&updated)?).with_view(entry_row(&updated)))
        }),
        ActionCmd::Delete { action_id } => with_engine(env, |engine, env| {
            let e = saved_entry(engine, action_id)?;
            env.confirm(g.yes, &format!("delete saved action {}", e.entry_id))?;
            a2h::delete_instance(&engine.a2h(None), &env.actor(), &e.entry_id)?;
            Ok(Output::new(json!({ "deleted": e.entry_id })))
        }),
        ActionCmd::Export => {
            let engine = open_engine(env)?;
            let entries = engine.memory().list()?;
            let rows: Vec<Value> = entries.iter().map(entry_row).collect();
            Ok(Output::new(to_doc(&entries)?).with_view(Value::Array(rows)))
        }
        ActionCmd::LinkMitigation {
            action_id,
            mitigation_ids,
        } => with_engine(env, |engine, env| {
            for m in mitigation_ids {
                if engine.mitigations().get(m).is_none() {
                    return Err(AuraError::not_found("mitigation", m.clone()));
                }
            }
            let e = saved_entry(engine, action_id)?;
            let patch = EntryPatch {
                link_mitigations: mitigation_ids.clone(),
                ..Default::default()
            };
            let updated = a2h::update_instance(&engine.a2h(None), &env.actor(), &e.entry_id, &patch)?;
            Ok(Output::new(to_doc(&updated)?).with_view(entry_row(&updated)))
        }),
    }
}

fn parse_mitigations(text: &str) -> Result<Vec<Mitigation>> {
    let value: Value = serde_json::from_str(text)?;
    match value {
        Value::Array(xs) => xs.iter().map(Mitigation::from_json).collect(),
        other => Ok(vec![Mitigation::from_json(&other)?]),
    }
}

fn mitigation_row(m: &Mitigation) -> Value {
    json!({
        "mitigation_id": m.mitigation_id,
        "primitive": m.primitive,
        "rewrite_capable": m.rewrite_capable,
        "provenance": m.provenance,
        "steps": m.steps.len(),
    })
}

fn mitigation(cmd: &MitigationCmd, g: &GlobalOpts, env: &mut Env) -> Result<Output> {
    match cmd {
        MitigationCmd::Save { mitigation } => {
            let text = env.read(&Source::classify(mitigation))?;
            let items = parse_mitigations(&text)?;
            with_engine(env, |engine, env| {
                let ctx = engine.a2h(None);
                let outcomes = items
                    .into_iter()
                    .map(|m| {
                        let id = m.mitigation_id.clone();
                        a2h::mitigations_control(&ctx, &env.actor(), MitigationOp::Upsert, &id, Some(m))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Output::new(to_doc(&outcomes)?))
            })
        }
        MitigationCmd::Validate { mitigation } => {
            let items = parse_mitigations(&env.read(&Source::classify(mitigation))?)?;
            let ids: Vec<&str> = items.iter().map(|m| m.mitigation_id.as_str()).collect();
            Ok(Output::new(json!({ "valid": true, "mitigation_ids": ids })))
        }
        MitigationCmd::Run { mitigation_id, action } => with_engine(env, |engine, env| {
            let m = engine
                .mitigations()
                .get(mitigation_id)
                .ok_or_else(|| AuraError::not_found("mitigation", mitigation_id.clone()))?;
            let mut runs = Vec::new();
            match action {
                Some(arg) => {
                    let record = load_action(engine, arg, env)?;
                    let a = engine.assess(&record, &assess_opts(g))?;
                    let report = engine.run_mitigations(std::slice::from_ref(&m), &record, &a.profile);
                    runs.push(json!({ "action_id": record.action_id, "trace_id": a.profile.trace_id, "report": report }));
                }
                None => {
                    for e in engine.memory().list()? {
                        let Some(stored) = e.assessment.as_ref() else { continue };
                        if !e.mitigation_ids.contains(mitigation_id) {
                            continue;
                        }
                        let report = engine.run_mitigations(std::slice::from_ref(&m), &e.action_snapshot, &stored.profile);
                        runs.push(json!({ "entry_id": e.entry_id, "action_id": e.action_snapshot.action_id, "report": report }));
                    }
                    if runs.is_empty() {
                        return Err(AuraError::Precondition(format!(
                            "mitigation '{mitigation_id}' is not linked to any saved action; pass --action"
                        )));
                    }
                }
            }
            let view: Vec<Value> = runs
                .iter()
                .map(|r| json!({"action_id": r["action_id"], "decision": r["report"]["final_decision"], "steps": r["report"]["steps"].as_array().map_or(0, Vec::len)}))
                .collect();
            Ok(Output::new(Value::Array(runs)).with_view(Value::Array(view)))
        }),
        MitigationCmd::Show { mitigation_id } => {
            let engine = open_engine(env)?;
            let m = engine
                .mitigations()
                .get(mitigation_id)
                .ok_or_else(|| AuraError::not_found("mitigation", mitigation_id.clone()))?;
            Ok(Output::new(to_doc(&m)?))
        }
        MitigationCmd::List => {
            let engine = open_engine(env)?;
            let items = engine.mitigations().snapshot();
            let view: Vec<Value> = items.iter().map(mitigation_row).collect();
            Ok(Output::new(to_doc(&*items)?).with_view(Value::Array(view)))
        }
        MitigationCmd::Delete { mitigation_id } => with_engine(env, |engine, env| {
            if engine.mitigations().get(mitigation_id).is_none() {
                return Err(AuraError::not_found("mitigation", mitigation_id.clone()));
            }
            env.confirm(g.yes, &format!("delete mitigation {mitigation_id}"))?;
            let out = a2h::mitigations_control(&engine.a2h(None), &env.actor(), MitigationOp::Delete, mitigation_id, None)?;
            Ok(Output::new(to_doc(&out)?))
        }),
    }
}

fn read_dataset(path: &Path) -> Result<(String, BatchFormat)> {
    let format = BatchFormat::from_path(path).ok_or_else(|| {
        AuraError::InvalidInput(format!("{}: expected a .csv, .jsonl or .json file", path.display()))
    })?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| AuraError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    Ok((text, format))
}

fn file(cmd: &FileCmd, g: &GlobalOpts, env: &mut Env) -> Result<Output> {
    match cmd {
        FileCmd::Assess { input } => {
            let (text, format) = read_dataset(input)?;
            let rows = parse_batch(&text, format)?;
            with_engine(env, |engine, _| batch_output(&assess_batch(engine, rows, &assess_opts(g))))
        }
        FileCmd::Test { input, expected } => {
            let (text, format) = read_dataset(input)?;
            let rows = parse_batch(&text, format)?;
            let expectations = match expected {
                Some(p) => {
                    let (t, f) = read_dataset(p)?;
                    parse_expected(&t, f)?
                }
                None => Vec::new(),
            };
            with_engine(env, |engine, _| {
                let opts = AssessOptions {
                    auto_save: Some(false),
                    ..assess_opts(g)
                };
                let report = compare(&assess_batch(engine, rows, &opts), &expectations);
                let view: Vec<Value> = report
                    .rows
                    .iter()
                    .map(|r| {
                        let failed: Vec<&str> = r.checks.iter().filter(|c| !c.pass).map(|c| c.field.as_str()).collect();
                        json!({"action_id": r.action_id, "pass": r.pass, "failed": failed, "error": r.error})
                    })
                    .collect();
                Ok(Output::new(to_doc(&report)?).with_view(Value::Array(view)))
            })
        }
    }
}

fn config(cmd: &ConfigCmd, env: &mut Env) -> Result<Output> {
    match cmd {
        ConfigCmd::Set { key, value } => {
            let mut cfg = env.home.stored_config()?;
            cfg.set(key, value)?;
            env.home.save_config(&cfg)?;
            Ok(Output::new(to_doc(&cfg)?))
        }
        ConfigCmd::Show => Ok(Output::new(to_doc(&env.home.load_config()?)?)),
        ConfigCmd::Reset => {
            let cfg = EngineConfig::default();
            env.home.save_config(&cfg)?;
            Ok(Output::new(to_doc(&cfg)?))
        }
    }
}

fn memory(cmd: &MemoryCmd, g: &GlobalOpts, env: &mut Env) -> Result<Output> {
    match cmd {
        MemoryCmd::Purge {
            actions,
            mitigations,
            rules,
            all,
        } => {
            let (a, m, r) = (*actions || *all, *mitigations || *all, *rules || *all);
            let what: Vec<&str> = [(a, "actions"), (m, "mitigations"), (r, "rules")]
                .iter()
                .filter(|(on, _)| *on)
                .map(|(_, n)| *n)
                .collect();
            env.confirm(g.yes, &format!("purge {}", what.join(", ")))?;
            with_engine(env, |engine, env| {
                let ctx = engine.a2h(None);
                let actor = env.actor();
                let purged_actions = if a { a2h::purge(&ctx, &actor)? } else { 0 };
                let mut purged_mitigations = 0;
                if m {
                    for item in engine.mitigations().snapshot().iter() {
                        a2h::mitigations_control(&ctx, &actor, MitigationOp::Delete, &item.mitigation_id, None)?;
                        purged_mitigations += 1;
                    }
                }
                let mut purged_rules = 0;
                if r {
                    let mut cfg = env.home.stored_config()?;
                    purged_rules = cfg.preferences.len();
                    cfg.preferences.clear();
                    env.home.save_config(&cfg)?;
                }
                Ok(Output::new(json!({
                    "purged": { "actions": purged_actions, "mitigations": purged_mitigations, "rules": purged_rules }
                })))
            })
        }
        MemoryCmd::Stats => {
            let engine = open_engine(env)?;
            let open = engine.sessions().list().iter().filter(|s| s.is_open()).count();
            Ok(Output::new(json!({
                "memory": engine.memory().stats()?,
                "mitigations": engine.mitigations().len(),
                "rules": engine.config().preferences.len(),
                "trace_events": engine.traces().len(),
                "open_sessions": open,
            })))
        }
        MemoryCmd::Export => {
            let engine = open_engine(env)?;
            Ok(Output::new(to_doc(&engine.memory().export()?)?))
        }
        MemoryCmd::Import { document } => {
            let text = env.read(&Source::classify(document))?;
            let doc: MemoryExport =
                serde_json::from_str(&text).map_err(|e| AuraError::InvalidInput(format!("memory document: {e}")))?;
            with_engine(env, |engine, env| {
                let n = a2h::import(&engine.a2h(None), &env.actor(), doc)?;
                Ok(Output::new(json!({ "imported": n })))
            })
        }
    }
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    ok: bool,
    detail: String,
}

fn check(name: &'static str, r: Result<String>) -> Check {
    match r {
        Ok(detail) => Check { name, ok: true, detail },
        Err(e) => Check {
            name,
            ok: false,
            detail: e.to_string(),
        },
    }
}

fn doctor(env: &Env) -> Vec<Check> {
    let home = &env.home;
    let cfg = home.stored_config();
    let mut checks = vec![check(
        "config",
        cfg.as_ref()
            .map(|c| {
                format!(
                    "cut points {:?}, near {} <= exact {}",
                    c.policy.cut_points, c.memory.theta_near, c.memory.theta_exact
                )
            })
            .map_err(|e| AuraError::Config(e.to_string())),
    )];
    let Ok(cfg) = cfg else { return checks };
    checks.push(check(
        "mitigations",
        home.load_mitigations().and_then(|ms| {
            for m in &ms {
                m.validate()?;
            }
            Ok(format!("{} definitions valid", ms.len()))
        }),
    ));
    let store = match &cfg.memory.url {
        Some(url) => RemoteMemoryStore::connect(url, env.token.clone()).map(|s| Box::new(s) as Box<dyn MemoryBackend>),
        None => home.local_memory(&cfg).map(|s| Box::new(s) as Box<dyn MemoryBackend>),
    };
    checks.push(check(
        "memory",
        store.and_then(|s| {
            let entries = s.list()?;
            for e in &entries {
                e.validate(s.dimensionality())?;
            }
            Ok(format!(
                "{} entries, unit-norm embeddings of {} components, local sums match global",
                entries.len(),
                s.dimensionality()
            ))
        }),
    ));
    checks.push(check(
        "state",
        home.open_engine(cfg, None).map(|e| {
            let open = e.sessions().list().iter().filter(|s| s.status == SessionStatus::Open).count();
            format!("{} trace events, {open} open sessions", e.traces().len())
        }),
    ));
    checks
}

fn system(cmd: &SystemCmd, env: &mut Env) -> Result<Output> {
    match cmd {
        SystemCmd::Status => {
            let engine = open_engine(env)?;
            let cfg = engine.config();
            Ok(Output::new(json!({
                "status": "ok",
                "home": env.home.root().display().to_string(),
                "evaluator": engine.evaluator_name(),
                "memory_backend": if cfg.memory.url.is_some() { "remote" } else { "local" },
                "memory_entries": engine.memory().stats()?.count,
                "mitigations": engine.mitigations().len(),
                "trace_events": engine.traces().len(),
                "pending_runs": engine.pending_runs().len(),
            })))
        }
        SystemCmd::Version => Ok(Output::new(json!({
            "name": "aura",
            "version": env!("CARGO_PKG_VERSION"),
            "memory_format": 1,
            "target": format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            "profile": if cfg!(debug_assertions) { "debug" } else { "release" },
        }))),
        SystemCmd::Doctor => {
            let checks = doctor(env);
            let ok = checks.iter().all(|c| c.ok);
            let doc = json!({ "ok": ok, "checks": checks });
            if ok {
                Ok(Output::new(doc.clone()).with_view(doc["checks"].clone()))
            } else {
                let failed: Vec<&str> = checks.iter().filter(|c| !c.ok).map(|c| c.name).collect();
                Err(AuraError::Precondition(format!("doctor checks failed: {}", failed.join(", "))))
            }
        }
    }
}

fn hitl(cmd: &HitlCmd, env: &mut Env) -> Result<Output> {
    match cmd {
        HitlCmd::List => {
            let engine = open_engine(env)?;
            let mut sessions = engine.sessions().list();
            sessions.sort_by_key(|s| !s.is_open());
            let view: Vec<Value> = sessions
                .iter()
                .map(|s| {
                    json!({"session_id": s.session_id, "action_id": s.action_id, "status": s.status,
                           "questions": s.questions.len(), "trace_id": s.trace_id})
                })
                .collect();
            Ok(Output::new(to_doc(&sessions)?).with_view(Value::Array(view)))
        }
        HitlCmd::Show { session_id } => {
            let engine = open_engine(env)?;
            Ok(Output::new(to_doc(&engine.sessions().get(session_id)?)?))
        }
        HitlCmd::Answer {
            session_id,
            answers,
            operator,
        } => {
            let text = env.read(&Source::classify(answers))?;
            let value: Value = serde_json::from_str(&text)?;
            let list = match value {
                Value::Object(mut m) if m.contains_key("answers") => m.remove("answers").unwrap_or_default(),
                other => other,
            };
            let parsed: Vec<Answer> =
                serde_json::from_value(list).map_err(|e| AuraError::InvalidInput(format!("answers: {e}")))?;
            with_engine(env, |engine, _| {
                let r = engine.answer(session_id, &parsed, &Actor::human(operator))?;
                let mut view = assessment_view(&r.assessment);
                view["gamma_before"] = json!(r.delta.gamma_before);
                view["gamma_after"] = json!(r.delta.gamma_after);
                Ok(Output::new(to_doc(&r)?).with_view(view))
            })
        }
        HitlCmd::Abandon { session_id, operator } => with_engine(env, |engine, _| {
            Ok(Output::new(to_doc(&engine.abandon(session_id, &Actor::human(operator))?)?))
        }),
    }
}

/// Rendering of the result for the chosen format; CSV only for records.
pub fn render(out: &Output, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => crate::output::json(&out.doc),
        Format::Table => crate::output::table(out.tabular()),
        Format::Csv => crate::output::csv(out.tabular())?,
    })
}
