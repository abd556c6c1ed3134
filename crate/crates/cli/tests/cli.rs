use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_marl-dice"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn gen(dir: &Path, env: &str, recipe: &str) -> String {
    let out = format!("{env}-{recipe}.jsonl");
    ok(dir, &["gen-data", "--env", env, "--recipe", recipe, "--out", &out]);
    out
}

#[test]
fn gen_data_writes_the_literal_matrix_datasets() {
    let dir = tempfile::tempdir().unwrap();
    for (recipe, n) in [("a", 1), ("b", 2), ("c", 3), ("d", 4)] {
        let path = gen(dir.path(), "penalty-xor", recipe);
        let text = fs::read_to_string(dir.path().join(&path)).unwrap();
        assert_eq!(text.lines().count(), n, "recipe {recipe}");
        let side = json(&dir.path().join(path.replace(".jsonl", ".meta.json")));
        assert_eq!(side["manifest"]["command"], "gen-data");
        assert_eq!(side["manifest"]["wall_clock_secs"], Value::Null);
    }
}

#[test]
fn bad_recipe_and_unknown_flags_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = run(dir.path(), &["gen-data", "--env", "penalty-xor", "--recipe", "z", "--out", "z.jsonl"]);
    assert_eq!(bad.status.code(), Some(1));
    let flag = run(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(flag.status.code(), Some(1));
    let env = run(dir.path(), &["export-env", "--env", "nowhere", "--out", "x.json"]);
    assert_eq!(env.status.code(), Some(1));
    let alpha = gen(dir.path(), "penalty-xor", "c");
    let neg = run(
        dir.path(),
        &["train", "--env", "penalty-xor", "--dataset", &alpha, "--alpha", "-1", "--out", "o"],
    );
    assert_eq!(neg.status.code(), Some(1));
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    for cmd in ["envs", "export-env", "gen-data", "train", "verify-nash", "evaluate", "reproduce"] {
        assert!(top.contains(cmd), "missing {cmd}");
    }
    let train = ok(dir.path(), &["train", "--help"]);
    for flag in ["--env", "--dataset", "--algo", "--alpha", "--mode", "--K", "--seed", "--config", "--out", "--timings"] {
        assert!(train.contains(flag), "train help lacks {flag}");
    }
    let repro = ok(dir.path(), &["reproduce", "--help"]);
    for flag in ["--seeds", "--alpha", "--mode", "--K", "--config", "--out"] {
        assert!(repro.contains(flag), "reproduce help lacks {flag}");
    }
}

#[test]
fn training_writes_policy_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "penalty-xor", "a");
    ok(d, &["train", "--env", "penalty-xor", "--dataset", &data, "--algo", "alberdice", "--out", "al"]);
    let policy = json(&d.join("al/policy.json"));
    let a0 = policy["policy"]["agent_0"]["s"]["A"].as_f64().unwrap();
    let b1 = policy["policy"]["agent_1"]["s"]["B"].as_f64().unwrap();
    assert!(a0 * b1 >= 0.99);
    let report = json(&d.join("al/report.json"));
    assert_eq!(report["report"]["algo"], "alberdice");
    assert_eq!(report["manifest"], policy["manifest"]);

    let c = gen(d, "penalty-xor", "c");
    ok(d, &["train", "--env", "penalty-xor", "--dataset", &c, "--algo", "bc", "--out", "bc"]);
    let bc = json(&d.join("bc/policy.json"));
    assert!((bc["policy"]["agent_0"]["s"]["A"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!(!d.join("bc/report.json").exists());

    let x = gen(d, "xor", "c");
    ok(d, &["train", "--env", "xor", "--dataset", &x, "--algo", "optidice", "--alpha", "0.01", "--out", "od"]);
    let od = json(&d.join("od/policy.json"));
    for agent in ["agent_0", "agent_1"] {
        assert!((od["policy"][agent]["s"]["A"].as_f64().unwrap() - 0.5).abs() < 0.05);
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "penalty-xor", "c");
    fs::write(d.join("cfg.json"), r#"{"alpha": 0.01, "seed": 4}"#).unwrap();
    ok(d, &["train", "--env", "penalty-xor", "--dataset", &data, "--config", "cfg.json", "--out", "f"]);
    ok(d, &["train", "--env", "penalty-xor", "--dataset", &data, "--config", "cfg.json", "--alpha", "1", "--out", "g"]);
    let f = json(&d.join("f/report.json"));
    let g = json(&d.join("g/report.json"));
    assert_eq!(f["report"]["config"]["alpha"], 0.01);
    assert_eq!(f["report"]["config"]["seed"], 4);
    assert_eq!(g["report"]["config"]["alpha"], 1.0);
    assert_eq!(g["report"]["config"]["seed"], 4);
    assert_ne!(f["manifest"]["config_hash"], g["manifest"]["config_hash"]);

    fs::write(d.join("bad.json"), r#"{"alpha": 1, "typo": 2}"#).unwrap();
    let bad = run(d, &["train", "--env", "penalty-xor", "--dataset", &data, "--config", "bad.json", "--out", "h"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "bridge", "mix");
    fs::copy(d.join(&data), d.join("first.jsonl")).unwrap();
    gen(d, "bridge", "mix");
    assert_eq!(fs::read(d.join(&data)).unwrap(), fs::read(d.join("first.jsonl")).unwrap());

    let c = gen(d, "penalty-xor", "d");
    for out in ["x", "y"] {
        ok(d, &["train", "--env", "penalty-xor", "--dataset", &c, "--seed", "3", "--out", out]);
    }
    for file in ["policy.json", "report.json"] {
        let x = fs::read_to_string(d.join("x").join(file)).unwrap();
        let y = fs::read_to_string(d.join("y").join(file)).unwrap();
        // outputs differ only by the directory recorded in the manifest
        assert_eq!(x.replace("x/", "y/"), y, "{file}");
    }
}

#[test]
fn timings_fill_the_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "penalty-xor", "b");
    ok(d, &["train", "--env", "penalty-xor", "--dataset", &data, "--timings", "--out", "t"]);
    let report = json(&d.join("t/report.json"));
    assert!(report["manifest"]["wall_clock_secs"].as_f64().unwrap() >= 0.0);
    assert!(report["report"]["wall_clock_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn verify_and_evaluate_read_the_trained_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["export-env", "--env", "penalty-xor", "--out", "game.json"]);
    let data = gen(d, "penalty-xor", "b");
    ok(d, &["train", "--env", "game.json", "--dataset", &data, "--out", "r"]);
    ok(
        d,
        &[
            "verify-nash", "--env", "game.json", "--policy", "r/policy.json", "--dataset", &data,
            "--train-report", "r/report.json", "--out", "nash.json",
        ],
    );
    let nash = json(&d.join("nash.json"));
    assert!(nash["nash"]["epsilon"].as_f64().unwrap() <= 1e-4);
    assert_eq!(nash["nash"]["violations"].as_array().unwrap().len(), 0);

    let table = ok(
        d,
        &["evaluate", "--env", "penalty-xor", "--policy", "r/policy.json", "--dataset", &data, "--episodes", "100", "--out", "eval.json"],
    );
    assert!(table.contains("penalty-xor"));
    let eval = json(&d.join("eval.json"));
    let run = &eval["eval"]["runs"][0];
    assert!((run["episodic_return"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(run["ood_rate"].as_f64().unwrap(), 0.0);
    assert_eq!(run["monte_carlo"]["episodes"], 100);
}

#[test]
fn reproduce_matrix_reports_checks_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let low = run(d, &["reproduce", "matrix", "--alpha", "0.01", "--seeds", "2", "--out", "low"]);
    let text = String::from_utf8(low.stdout).unwrap();
    assert_eq!(low.status.code(), Some(0), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).count() >= 12);
    for f in ["outcome.json", "runs.csv", "summary.csv"] {
        assert!(d.join("low").join(f).exists());
    }
    // reruns give the same outcome
    run(d, &["reproduce", "matrix", "--alpha", "0.01", "--seeds", "2", "--out", "again"]);
    let a = fs::read_to_string(d.join("low/outcome.json")).unwrap();
    let b = fs::read_to_string(d.join("again/outcome.json")).unwrap();
    let strip = |s: &str| s.replace("low/", "").replace("again/", "").lines().filter(|l| !l.contains("matrix-runtime") && !l.contains("for the full grid")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&a), strip(&b));

    let high = run(d, &["reproduce", "matrix", "--seeds", "1"]);
    let text = String::from_utf8(high.stdout).unwrap();
    assert_eq!(high.status.code(), Some(3));
    assert!(text.contains("FAIL alberdice-c"));
}

#[test]
fn reproduce_bridge_compares_against_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["reproduce", "bridge", "--seeds", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("oracle-optimal return -0.8000"));
    assert!(text.contains("PASS bridge-optimal-opening"));
}

#[test]
fn solver_failures_exit_with_code_two_and_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // one Newton iteration cannot solve a multi-state dual
    let data = gen(d, "bridge", "optimal");
    fs::write(d.join("cfg.json"), r#"{"inner": {"max_iter": 1, "grad_tol": 1e-300}}"#).unwrap();
    let out = run(d, &["train", "--env", "bridge", "--dataset", &data, "--config", "cfg.json", "--out", "f"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let diag: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(diag["status"], "solver-failure");
    assert_eq!(json(&d.join("f/failure.json"))["status"], "solver-failure");
}
