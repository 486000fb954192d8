//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request};
use chrono::{DateTime, Duration, Utc};
use http_body_util::BodyExt;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

use aura_core::clock::FixedClock;
use aura_core::evaluator::FixtureTable;
use aura_core::hitl::IncrementalGamma;
use aura_core::home::Home;
use aura_core::memory::{BulkOp, InMemoryStore, InsertOutcome, MatchKind, MemoryBackend, MemoryConfig, MemoryEntry, Selector};
use aura_core::mitigation::{Mitigation, MitigationRegistry, PreferenceRecord, Primitive};
use aura_core::model::{Dimension, FactValue, ScoreMatrix, ScoreProvenance, Tier, WeightScheme};
use aura_core::profiling::{label, ThresholdPolicy};
use aura_core::scoring::{equal_weight_scheme, evaluate, frequency_weight_scheme_scaled, gamma_raw};
use aura_core::{ActionRecord, AssessOptions, Decision, Engine, EngineConfig};

const SEED: &str = "42";
const FIXED_TIME: &str = "2026-03-01T18:00:00Z";
const CASE_ID: &str = "submit-form-9b632cfa";

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/case_study")
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_dir().join(name)).expect("fixture")
}

fn fixed_time() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339(FIXED_TIME).unwrap().with_timezone(&Utc)
}

fn case_action() -> ActionRecord {
    serde_json::from_str(&fixture("action.json")).unwrap()
}

fn engine_at(cfg: EngineConfig, at: DateTime<Utc>) -> Engine {
    let ms: Vec<Mitigation> = serde_json::from_str(&fixture("mitigations.json")).unwrap();
    Engine::builder(cfg)
        .fixtures(FixtureTable::from_json_str(&fixture("evaluator.json")).unwrap())
        .mitigations(Arc::new(MitigationRegistry::new(ms).unwrap()))
        .clock(Arc::new(FixedClock(at)))
        .build()
        .unwrap()
}

/// One random instance: dimension weights, applicability, unnormalised
/// context weights and scores, indexed `[d][c]`.
struct Instance {
    u: Vec<f64>,
    applicable: Vec<Vec<bool>>,
    p_raw: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

impl Instance {
    fn random(rng: &mut StdRng) -> Instance {
        let nd = rng.random_range(1..=8);
        let nc = rng.random_range(1..=6);
        let mut inst = Instance {
            u: (0..nd).map(|_| rng.random_range(0.0..2.0)).collect(),
            applicable: Vec::new(),
            p_raw: Vec::new(),
            s: Vec::new(),
        };
        for _ in 0..nd {
            let mut mask: Vec<bool> = (0..nc).map(|_| rng.random_bool(0.7)).collect();
            mask[rng.random_range(0..nc)] = true;
            inst.applicable.push(mask);
            inst.p_raw.push((0..nc).map(|_| rng.random_range(0.05..1.0)).collect());
            inst.s.push((0..nc).map(|_| rng.random_range(0.0..=1.0)).collect());
        }
        inst
    }

    fn p(&self, d: usize, c: usize) -> f64 {
        let total: f64 = (0..self.s[d].len())
            .filter(|&k| self.applicable[d][k])
            .map(|k| self.p_raw[d][k])
            .sum();
        self.p_raw[d][c] / total
    }

    fn build(&self) -> (WeightScheme, ScoreMatrix) {
        let mut w = WeightScheme::default();
        let mut m = ScoreMatrix::default();
        for d in 0..self.u.len() {
            w.dimension_weights.insert(format!("d{d}"), self.u[d]);
            let mut ctx = BTreeMap::new();
            for c in 0..self.s[d].len() {
                if self.applicable[d][c] {
                    ctx.insert(format!("c{c}"), self.p(d, c));
                    m.set(&format!("c{c}"), &format!("d{d}"), self.s[d][c], ScoreProvenance::Evaluator);
                }
            }
            w.context_weights.insert(format!("d{d}"), ctx);
        }
        (w, m)
    }

    fn oracle_gamma(&self) -> f64 {
        let mut g = 0.0;
        for d in 0..self.u.len() {
            let mut inner = 0.0;
            for c in 0..self.s[d].len() {
                if self.applicable[d][c] {
                    inner += self.p(d, c) * self.s[d][c];
                }
            }
            g += self.u[d] * inner;
        }
        g
    }

    fn layout(&self) -> (Vec<Dimension>, BTreeMap<String, Vec<String>>) {
        let dims = (0..self.u.len())
            .map(|d| Dimension::new(&format!("d{d}"), &format!("d{d}"), Tier::Core))
            .collect();
        let map = (0..self.u.len())
            .map(|d| {
                let cs = (0..self.s[d].len())
                    .filter(|&c| self.applicable[d][c])
                    .map(|c| format!("c{c}"))
                    .collect();
                (format!("d{d}"), cs)
            })
            .collect();
        (dims, map)
    }
}

fn instances(n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n).map(|_| Instance::random(&mut rng)).collect()
}

fn gamma_oracle() -> Check {
    for (i, inst) in instances(1000, 1).iter().enumerate() {
        let (w, m) = inst.build();
        let got = gamma_raw(&w, &m).map_err(|e| e.to_string())?;
        let want = inst.oracle_gamma();
        ensure!((got - want).abs() <= 1e-9, "instance {i}: {got} vs {want}");
    }
    Ok(())
}

fn bounds() -> Check {
    for (i, inst) in instances(1000, 1).iter().enumerate() {
        let (w, m) = inst.build();
        let r = evaluate(&w, &m).map_err(|e| e.to_string())?;
        let u: f64 = inst.u.iter().sum();
        ensure!(r.gamma >= 0.0 && r.gamma <= u + 1e-12, "instance {i}: gamma {} outside [0, {u}]", r.gamma);
        ensure!((0.0..=100.0).contains(&r.gamma_norm), "instance {i}: gamma_norm {}", r.gamma_norm);
        ensure!((0.0..=0.25).contains(&r.variance), "instance {i}: variance {}", r.variance);
        ensure!((0.0..=100.0).contains(&r.concentration), "instance {i}: concentration {}", r.concentration);
    }
    Ok(())
}

fn special_cases() -> Check {
    let mut rng = StdRng::seed_from_u64(3);
    for (i, inst) in instances(1000, 1).iter().enumerate() {
        let (dims, map) = inst.layout();
        let eq = equal_weight_scheme(&dims, &map).map_err(|e| e.to_string())?;
        ensure!(eq.u_total() == dims.len() as f64, "instance {i}: U_tot {} for {} dims", eq.u_total(), dims.len());
        let m = inst.build().1;
        let k = rng.random_range(0.01..100.0);
        let a = evaluate(&frequency_weight_scheme_scaled(&dims, &map, 1.0).unwrap(), &m).unwrap();
        let b = evaluate(&frequency_weight_scheme_scaled(&dims, &map, k).unwrap(), &m).unwrap();
        ensure!((a.gamma_norm - b.gamma_norm).abs() <= 1e-9, "instance {i}: k={k} moved gamma_norm");
    }
    Ok(())
}

fn threshold_labelling() -> Check {
    let policy = ThresholdPolicy::default();
    let cases = [
        (15.0, "Low", Decision::Allow),
        (45.0, "Medium", Decision::Warn),
        (72.0, "High", Decision::Escalate),
        (30.0, "Medium", Decision::Warn),
        (60.0, "High", Decision::Escalate),
    ];
    for (g, want_label, want_decision) in cases {
        let (l, d) = label(g, &policy);
        ensure!(l == want_label && d == want_decision, "{g} -> {l}/{d:?}, want {want_label}/{want_decision:?}");
    }
    Ok(())
}

fn check_case_profile(p: &Value) -> Check {
    let g = p["gamma_norm"].as_f64().ok_or("no gamma_norm")?;
    ensure!((g - 58.0).abs() <= 0.5, "gamma_norm {g}");
    let top: Vec<(String, f64)> = p["top_dimensions"]
        .as_array()
        .ok_or("no top_dimensions")?
        .iter()
        .map(|t| (t["label"].as_str().unwrap_or("").to_string(), t["score"].as_f64().unwrap_or(-1.0)))
        .collect();
    let want = [("Consent", 0.80), ("Autonomy", 0.72), ("Reversibility", 0.55)];
    ensure!(top.len() == 3, "top_dimensions {top:?}");
    for ((l, s), (wl, ws)) in top.iter().zip(want) {
        ensure!(l == wl && (s - ws).abs() < 1e-12, "top_dimensions {top:?}");
    }
    let var = p["uncertainty"]["variance"].as_f64().ok_or("no variance")?;
    ensure!((var - 0.07).abs() <= 0.01, "variance {var}");
    ensure!(p["decision"] == "rewrite", "decision {}", p["decision"]);
    ensure!(p["mitigation_id"] == "confirm_identity_and_email", "mitigation_id {}", p["mitigation_id"]);
    let steps = json!([
        "Prompt user to confirm preferred email for this domain",
        "Require MFA/OTP if user is not verified"
    ]);
    ensure!(p["mitigation_steps"] == steps, "mitigation_steps {}", p["mitigation_steps"]);
    Ok(())
}

fn memory_rules() -> Check {
    let e = engine_at(EngineConfig::default(), fixed_time());
    let first = e.assess(&case_action(), &AssessOptions::default()).map_err(|e| e.to_string())?;
    let again = e.assess(&case_action(), &AssessOptions::default()).map_err(|e| e.to_string())?;
    ensure!(again.memory.match_kind == MatchKind::Exact, "(a) match {:?}", again.memory.match_kind);
    ensure!(again.evaluator_calls.score_pair == 0, "(a) {} score calls", again.evaluator_calls.score_pair);
    ensure!(again.profile.same_assessment(&first.profile), "(a) profile differs");

    let mut morning = case_action();
    morning.context_facts.insert(
        "context".into(),
        FactValue::List(vec!["untrusted_domain".into(), "morning".into()]),
    );
    morning.action_id = morning.derived_id();
    let near = e.assess(&morning, &AssessOptions::default()).map_err(|e| e.to_string())?;
    let dims = near.dimensions.len();
    ensure!(near.memory.match_kind == MatchKind::Near, "(b) match {:?}", near.memory.match_kind);
    ensure!(near.memory.rescored_contexts == ["time_of_day"], "(b) rescored {:?}", near.memory.rescored_contexts);
    ensure!(near.evaluator_calls.score_pair as usize == dims, "(b) {} calls for {dims} pairs", near.evaluator_calls.score_pair);

    let stored = e.memory().get(first.memory.saved_entry_id.as_deref().ok_or("(c) nothing saved")?).unwrap();
    let theta_dup = e.memory().config().theta_dup;
    let mut copy = stored.clone();
    copy.entry_id = "copy".into();
    match e.memory().insert(copy).map_err(|e| e.to_string())? {
        InsertOutcome::Rejected { duplicate_of, similarity } => {
            ensure!(duplicate_of == stored.entry_id && similarity >= theta_dup, "(c) rejected at {similarity}")
        }
        other => return Err(format!("(c) duplicate accepted: {other:?}")),
    }

    let now = fixed_time() + Duration::days(30);
    let store = InMemoryStore::new(16, MemoryConfig::default()).unwrap();
    let result = stored.as_gamma_result();
    let mut expired = Vec::new();
    for i in 0..10 {
        let mut v = vec![0.0; 16];
        v[i] = 1.0;
        let mut entry = MemoryEntry::new(&format!("e{i}"), v, case_action(), &result, fixed_time());
        if i % 3 == 0 {
            entry.ttl = Some(fixed_time() + Duration::days(1));
            expired.push(entry.entry_id.clone());
        } else if i % 3 == 1 {
            entry.ttl = Some(fixed_time() + Duration::days(90));
        }
        store.insert(entry).map_err(|e| e.to_string())?;
    }
    let n = store
        .bulk(BulkOp::Delete { selector: Selector::expired() }, now)
        .map_err(|e| e.to_string())?;
    let left: Vec<String> = store.list().unwrap().into_iter().map(|e| e.entry_id).collect();
    ensure!(n == expired.len(), "(d) removed {n}, expected {}", expired.len());
    ensure!(left.len() == 10 - expired.len() && left.iter().all(|id| !expired.contains(id)), "(d) left {left:?}");
    Ok(())
}

fn threshold_gate() -> Check {
    let e = engine_at(EngineConfig { hitl_enabled: false, ..Default::default() }, fixed_time());
    let a = e.assess(&case_action(), &AssessOptions::default()).map_err(|e| e.to_string())?;
    let gate = Mitigation::new("gate", Primitive::ThresholdGate)
        .with_param("block", 0.60)
        .with_param("warn", 0.30);
    for (g, want) in [(72.0, Decision::Block), (45.0, Decision::Warn), (20.0, Decision::Allow)] {
        let mut p = a.profile.clone();
        p.gamma_norm = g;
        let report = e.run_mitigations(std::slice::from_ref(&gate), &case_action(), &p);
        let got = report.steps.first().map(|s| s.decision);
        ensure!(got == Some(want), "gamma_norm {g}: {got:?}, want {want:?}");
    }
    Ok(())
}

fn hitl_linearity() -> Check {
    let mut rng = StdRng::seed_from_u64(11);
    for (i, inst) in instances(200, 5).iter().enumerate() {
        let (w, m) = inst.build();
        let mut inc = IncrementalGamma::new(w.clone(), m.clone()).map_err(|e| e.to_string())?;
        let pairs = w.pairs();
        let k = &pairs[rng.random_range(0..pairs.len())];
        let old = m.get(&k.context_id, &k.dimension_id).unwrap();
        let s = rng.random_range(0.0..=1.0);
        let before = inc.gamma();
        inc.override_score(&k.context_id, &k.dimension_id, s).unwrap();
        let want = w.joint_weight(&k.context_id, &k.dimension_id) * (s - old);
        ensure!((inc.gamma() - before - want).abs() <= 1e-9, "sequence {i}: override not linear");

        let mut added = 0;
        for step in 0..rng.random_range(1..20) {
            let dims: Vec<String> = inc.weights().dimension_weights.keys().cloned().collect();
            let dim = dims[rng.random_range(0..dims.len())].clone();
            match rng.random_range(0..5) {
                0 | 1 => {
                    let pairs = inc.weights().pairs();
                    let k = &pairs[rng.random_range(0..pairs.len())];
                    inc.override_score(&k.context_id, &k.dimension_id, rng.random_range(0.0..=1.0)).unwrap();
                }
                2 => inc.set_dimension_weight(&dim, rng.random_range(0.0..2.0)).unwrap(),
                3 => {
                    let cs: Vec<String> = inc.weights().context_weights[&dim].keys().cloned().collect();
                    let c = cs[rng.random_range(0..cs.len())].clone();
                    inc.set_context_weight(&c, &dim, rng.random_range(0.0..=1.0)).unwrap();
                }
                _ => {
                    added += 1;
                    if rng.random_bool(0.5) {
                        let scores = BTreeMap::from([(dim, rng.random_range(0.0..=1.0))]);
                        inc.add_context(&format!("new-c{added}"), &scores).unwrap();
                    } else {
                        let scores = BTreeMap::from([("c0".to_string(), rng.random_range(0.0..=1.0))]);
                        inc.add_dimension(&format!("new-d{added}"), rng.random_range(0.0..2.0), &scores).unwrap();
                    }
                }
            }
            let full = evaluate(inc.weights(), inc.scores()).map_err(|e| e.to_string())?;
            ensure!((inc.gamma() - full.gamma).abs() <= 1e-9, "sequence {i} step {step}: {} vs {}", inc.gamma(), full.gamma);
        }
    }
    Ok(())
}

fn preference_policy() -> Check {
    // Cut points that put the case study (58) in the allow band.
    let mut cfg = EngineConfig {
        hitl_enabled: false,
        ..Default::default()
    };
    cfg.policy.cut_points = vec![0.0, 70.0, 90.0, 100.0];
    let base = engine_at(cfg.clone(), fixed_time())
        .assess(&case_action(), &AssessOptions::default())
        .map_err(|e| e.to_string())?;
    ensure!(base.final_decision == Decision::Allow, "without preference: {:?}", base.final_decision);

    let mut pref: PreferenceRecord = serde_json::from_str(&fixture("preference.json")).unwrap();
    pref.created_at = Some(fixed_time());
    cfg.upsert_preference(pref).map_err(|e| e.to_string())?;
    let mut act = case_action();
    act.context_facts.insert("user_id".into(), FactValue::Text("ID".into()));
    let now = engine_at(cfg.clone(), fixed_time())
        .assess(&act, &AssessOptions::default())
        .map_err(|e| e.to_string())?;
    ensure!(now.profile.decision == Decision::Allow, "band decision {:?}", now.profile.decision);
    ensure!(now.final_decision == Decision::Escalate, "with preference: {:?}", now.final_decision);
    let later = engine_at(cfg, fixed_time() + Duration::days(181))
        .assess(&act, &AssessOptions::default())
        .map_err(|e| e.to_string())?;
    ensure!(later.final_decision == Decision::Allow, "after ttl: {:?}", later.final_decision);
    Ok(())
}

struct Cli {
    home: PathBuf,
    work: PathBuf,
    transcript: Vec<u8>,
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Cli {
    fn new(root: &Path) -> Cli {
        let _ = std::fs::remove_dir_all(root);
        let home = root.join("home");
        let work = root.join("work");
        std::fs::create_dir_all(home.join("agents")).unwrap();
        std::fs::create_dir_all(&work).unwrap();
        std::fs::copy(fixture_dir().join("evaluator.json"), home.join("evaluator.json")).unwrap();
        std::fs::copy(fixture_dir().join("mitigations.json"), home.join("mitigations.json")).unwrap();
        std::fs::copy(fixture_dir().join("web_agent.json"), home.join("agents/web_agent.json")).unwrap();
        for f in ["action.json", "mitigations.json", "web_agent.json"] {
            std::fs::copy(fixture_dir().join(f), work.join(f)).unwrap();
        }
        let mut batch = serde_json::from_str::<Value>(&fixture("action.json")).unwrap();
        batch["action_id"] = json!("case-1");
        std::fs::write(work.join("batch.jsonl"), format!("{batch}\n")).unwrap();
        std::fs::write(
            work.join("expected.csv"),
            "action_id,level,decision,gamma_norm\ncase-1,Medium,rewrite,0.58\n",
        )
        .unwrap();
        Cli {
            home,
            work,
            transcript: Vec::new(),
        }
    }

    fn run(&mut self, args: &[&str]) -> Run {
        let out = Command::new(env!("CARGO_BIN_EXE_aura"))
            .args(args)
            .current_dir(&self.work)
            .env("AURA_HOME", &self.home)
            .env("AURA_SEED", SEED)
            .env("AURA_FIXED_TIME", FIXED_TIME)
            .env("AURA_OPERATOR", "acceptance")
            .env_remove("AURA_TOKEN")
            .env_remove("AURA_LOG")
            .output()
            .expect("run aura");
        self.transcript.extend_from_slice(format!("$ aura {}\n", args.join(" ")).as_bytes());
        self.transcript.extend_from_slice(&out.stdout);
        Run {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    /// Runs a command that must succeed and returns its JSON output.
    fn ok(&mut self, args: &[&str]) -> Result<Value, String> {
        let r = self.run(args);
        if r.code != 0 {
            return Err(format!("aura {} exited {}: {}{}", args.join(" "), r.code, r.stdout, r.stderr));
        }
        if args.contains(&"table") {
            return Ok(Value::Null);
        }
        serde_json::from_str(&r.stdout).map_err(|e| format!("aura {}: {e}", args.join(" ")))
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.work.join(name)).unwrap_or_default()
    }
}

/// Every command once, in an order where each one succeeds. Returns the
/// assessment printed by `action assess` and the transcript.
fn cli_script(root: &Path) -> Result<(Value, Vec<u8>), String> {
    let mut cli = Cli::new(root);
    cli.ok(&["system", "version"])?;
    cli.ok(&["config", "show"])?;
    cli.ok(&["mitigation", "validate", "@mitigations.json"])?;
    cli.ok(&["mitigation", "save", "@mitigations.json"])?;
    cli.ok(&["mitigation", "list"])?;
    cli.ok(&["mitigation", "show", "confirm_identity_and_email"])?;
    cli.ok(&["action", "validate", "@action.json"])?;
    let assessed = cli.ok(&["action", "assess", "@action.json"])?;
    let session = assessed["hitl_session_id"].as_str().ok_or("assessment opened no session")?.to_string();
    cli.ok(&["hitl", "list"])?;
    cli.ok(&["hitl", "show", &session])?;
    cli.ok(&["hitl", "answer", &session, "[]", "--operator", "acceptance"])?;
    cli.ok(&["action", "list"])?;
    cli.ok(&["action", "show", CASE_ID])?;
    cli.ok(&["action", "update", CASE_ID, "--field", "notes=reviewed"])?;
    cli.ok(&["action", "link-mitigation", CASE_ID, "confirm_identity_and_email"])?;
    cli.ok(&["action", "mitigate", CASE_ID])?;
    cli.ok(&["action", "mitigate", CASE_ID, "--apply"])?;
    cli.ok(&["mitigation", "run", "confirm_identity_and_email"])?;
    cli.ok(&["action", "save", "@action.json", "--force"])?;
    cli.ok(&["action", "export"])?;
    cli.ok(&["agent", "actions", "web_agent"])?;
    cli.ok(&["agent", "assess", "@web_agent.json"])?;
    cli.ok(&["file", "assess", "--input", "batch.jsonl"])?;
    let tested = cli.ok(&["file", "test", "--input", "batch.jsonl", "--expected", "expected.csv"])?;
    if tested["accuracy"] != json!(1.0) {
        return Err(format!("file test accuracy {}", tested["accuracy"]));
    }
    cli.ok(&["--format", "table", "memory", "stats"])?;
    cli.ok(&["memory", "stats"])?;
    let sessions = cli.ok(&["hitl", "list"])?;
    let open = sessions
        .as_array()
        .and_then(|s| s.iter().find(|s| s["status"] == "open"))
        .and_then(|s| s["session_id"].as_str())
        .ok_or("no open session to abandon")?
        .to_string();
    cli.ok(&["hitl", "abandon", &open])?;
    cli.ok(&["action", "delete", CASE_ID, "--yes"])?;
    cli.ok(&["mitigation", "delete", "confirm_identity_and_email", "--yes"])?;
    cli.ok(&["system", "status"])?;
    cli.ok(&["system", "doctor"])?;
    cli.ok(&["memory", "purge", "--all", "--yes"])?;
    cli.ok(&["config", "reset"])?;
    Ok((assessed, cli.transcript))
}

fn scratch(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("aura-acceptance-{}-{name}", std::process::id()))
}

fn case_study_replay() -> Check {
    let mut cli = Cli::new(&scratch("replay"));
    let a = cli.ok(&["action", "assess", "@action.json"])?;
    check_case_profile(&a).map_err(|e| format!("cli: {e}"))?;
    let payload = service_assess(&scratch("replay-service"))?;
    check_case_profile(&payload).map_err(|e| format!("service: {e}"))
}

fn cli_conformance() -> Check {
    cli_script(&scratch("conformance"))?;
    let mut cli = Cli::new(&scratch("config"));
    for raw in ["0.95", "95"] {
        cli.ok(&["config", "set", "auto_save_threshold", raw])?;
        let shown = cli.ok(&["config", "show"])?;
        ensure!(shown["auto_save_threshold"] == json!(95.0), "set {raw}: shows {}", shown["auto_save_threshold"]);
    }
    let bad = cli.run(&["config", "set", "auto_save_threshold", "140"]);
    ensure!(bad.code == 1, "out-of-range threshold exited {}", bad.code);

    cli.ok(&["mitigation", "save", "@mitigations.json"])?;
    cli.ok(&["action", "assess", "@action.json"])?;
    cli.ok(&["agent", "assess", "web_agent"])?;
    cli.ok(&["memory", "export", "--out", "first.json"])?;
    cli.ok(&["memory", "import", "@first.json"])?;
    cli.ok(&["memory", "export", "--out", "second.json"])?;
    let (a, b) = (cli.read("first.json"), cli.read("second.json"));
    ensure!(!a.is_empty() && a == b, "export -> import -> export changed the document");
    Ok(())
}

fn determinism() -> Check {
    let root = scratch("determinism");
    let (_, first) = cli_script(&root)?;
    let (_, second) = cli_script(&root)?;
    ensure!(first == second, "transcripts differ");
    let s1 = service_assess(&scratch("det-service"))?;
    let s2 = service_assess(&scratch("det-service"))?;
    ensure!(s1 == s2, "service payloads differ");
    Ok(())
}

fn service_assess(root: &Path) -> Result<Value, String> {
    let _ = std::fs::remove_dir_all(root);
    std::fs::create_dir_all(root).unwrap();
    std::fs::copy(fixture_dir().join("evaluator.json"), root.join("evaluator.json")).unwrap();
    std::fs::copy(fixture_dir().join("mitigations.json"), root.join("mitigations.json")).unwrap();
    let home = Home::new(root)
        .with_seed(SEED.parse().unwrap())
        .with_fixed_time(fixed_time());
    let cfg = home.load_config().map_err(|e| e.to_string())?;
    let engine = home.open_engine(cfg, None).map_err(|e| e.to_string())?;
    let app = aura_service::router(Arc::new(aura_service::AppState::new(engine, Some(home))), &[]);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let body = rt.block_on(async {
        let req = Request::post("/assess")
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(fixture("action.json")))
            .unwrap();
        let resp = app.oneshot(req).await.map_err(|e| e.to_string())?;
        let bytes = resp.into_body().collect().await.map_err(|e| e.to_string())?.to_bytes();
        Ok::<_, String>(bytes)
    })?;
    let doc: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
    doc.get("payload").cloned().ok_or_else(|| format!("no payload: {doc}"))
}

fn service_matches_cli() -> Check {
    let mut cli = Cli::new(&scratch("parity"));
    let r = cli.run(&["action", "assess", "@action.json"]);
    ensure!(r.code == 0, "cli failed: {}", r.stderr);
    let payload = service_assess(&scratch("parity-service"))?;
    let rendered = format!("{}\n", serde_json::to_string_pretty(&payload).unwrap());
    ensure!(rendered == r.stdout, "service payload and cli output differ");
    Ok(())
}

fn main() {
    let criteria: Vec<(&str, fn() -> Check)> = vec![
        ("gamma oracle equivalence (1000 instances, 1e-9)", gamma_oracle),
        ("bounds suite (1000 instances)", bounds),
        ("special cases: equal scheme U_tot = |D|, frequency constant invariance", special_cases),
        ("threshold labelling 15/45/72 and boundaries 30/60", threshold_labelling),
        ("case-study replay via cli and service", case_study_replay),
        ("memory rules a-d", memory_rules),
        ("threshold gate 72 block / 45 warn / 20 allow", threshold_gate),
        ("hitl linearity and incremental refresh (200 sequences, 1e-9)", hitl_linearity),
        ("preference policy escalates in allow band, expires after ttl", preference_policy),
        ("cli conformance", cli_conformance),
        ("determinism: repeated runs byte-identical", determinism),
        ("service assessment payload equals cli json", service_matches_cli),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    for name in ["replay", "replay-service", "conformance", "config", "determinism", "det-service", "parity", "parity-service"] {
        let _ = std::fs::remove_dir_all(scratch(name));
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
