// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn unlearn(dir: &Path, args: &[&str]) -> Output {
    let root = format!("paths.root={}", dir.join("run").display());
    Command::new(env!("CARGO_BIN_EXE_unlearn"))
        .args(args)
        .args(["--set", &root])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn invalid_config_exits_with_one_and_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let out = unlearn(dir.path(), &["synth", "--set", "workers=0", "--set", "train.batch_size=0"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("workers") && err.contains("train.batch_size"), "{err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[heal]\nlearning_rat = 0.1\n").unwrap();
    let out = unlearn(dir.path(), &["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
}

#[test]
fn stage_without_inputs_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = unlearn(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("corpus.json") && err.contains("`synth`"), "{err}");
}

#[test]
fn report_renders_one_row_per_file() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |label: &str, smr: f64, el10: f64, state: &str| {
        let v = serde_json_like(label, smr, el10, state);
        let p = dir.path().join(format!("{label}.json"));
        std::fs::write(&p, v).unwrap();
        p
    };
    let a = mk("full", 0.0, 0.066, "TypeI");
    let b = mk("no-ntul", 3.33, 0.275, "TypeI");
    let out = unlearn(dir.path(), &["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert!(lines[3].starts_with("no-ntul") && lines[3].contains("3.33%"), "{text}");
}

fn serde_json_like(label: &str, smr: f64, el10: f64, state: &str) -> String {
    format!(
        r#"{{"label":"{label}","subject":"s","smr":{smr},"el10":{el10},"utility_drift":0.4,
"retained_fact_accuracy":98.0,"retained_fact_accuracy_base":100.0,"base_fact_accuracy":100.0,
"target_smr_base":100.0,"epsilon":5.0,"mechanism_state":"{state}","seeds":[0]}}"#
    )
}
