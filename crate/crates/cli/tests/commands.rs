use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/case_study").join(name)
}

fn home(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("aura-cli-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    for f in ["evaluator.json", "mitigations.json"] {
        std::fs::copy(fixture(f), dir.join(f)).unwrap();
    }
    dir
}

fn aura(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aura"))
        .args(args)
        .env("AURA_HOME", home)
        .env("AURA_SEED", "7")
        .env("AURA_FIXED_TIME", "2026-03-01T18:00:00Z")
        .env_remove("AURA_LOG")
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn action_arg() -> String {
    format!("@{}", fixture("action.json").display())
}

#[test]
fn assess_prints_profile_and_saves() {
    let h = home("assess");
    let out = aura(&h, &["action", "assess", &action_arg()]);
    assert_eq!(out.status.code(), Some(0));
    let a = json(&out);
    assert_eq!(a["decision"], "rewrite");
    assert_eq!(a["action_id"], "submit-form-9b632cfa");
    assert_eq!(a["status"], "pending_hitl");
    let list = json(&aura(&h, &["action", "list"]));
    assert_eq!(list.as_array().map(Vec::len), Some(1));
}

#[test]
fn user_errors_exit_one_with_error_document() {
    let h = home("errors");
    let out = aura(&h, &["action", "assess", "{\"bad\":1}"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["error"]["code"], "invalid-input");

    let out = aura(&h, &["action", "show", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["error"]["code"], "not-found");

    let out = aura(&h, &["config", "set", "auto_save_threshold", "1.5e3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn delete_requires_confirmation() {
    let h = home("delete");
    assert_eq!(aura(&h, &["action", "save", &action_arg()]).status.code(), Some(0));
    assert_eq!(aura(&h, &["action", "delete", "submit-form-9b632cfa"]).status.code(), Some(1));
    assert_eq!(aura(&h, &["action", "delete", "submit-form-9b632cfa", "--yes"]).status.code(), Some(0));
    assert_eq!(json(&aura(&h, &["action", "list"])).as_array().map(Vec::len), Some(0));
}

#[test]
fn threshold_accepts_both_scales() {
    let h = home("config");
    for raw in ["0.9", "90"] {
        assert_eq!(aura(&h, &["config", "set", "auto_save_threshold", raw]).status.code(), Some(0));
        assert_eq!(json(&aura(&h, &["config", "show"]))["auto_save_threshold"], 90.0);
    }
    assert_eq!(aura(&h, &["config", "reset"]).status.code(), Some(0));
    assert_eq!(json(&aura(&h, &["config", "show"]))["auto_save_threshold"], 95.0);
}

#[test]
fn out_flag_writes_the_document() {
    let h = home("out");
    let target = h.join("profile.json");
    let out = aura(&h, &["action", "assess", &action_arg(), "--out", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&target).unwrap()).unwrap();
    assert_eq!(written["mitigation_id"], "confirm_identity_and_email");
}
