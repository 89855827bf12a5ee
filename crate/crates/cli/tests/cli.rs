use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_forge");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn forge(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("FORGE_CONFIG").env("NO_COLOR", "1").output().unwrap()
}

fn forge_ok(args: &[&str]) -> Value {
    let out = forge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line on stderr");
    serde_json::from_str(last).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_output_matches_golden_files() {
    let cases: &[&[&str]] = &[
        &[],
        &["pipeline"],
        &["pipeline", "run"],
        &["rewards", "score"],
        &["masks", "compile"],
        &["dataset"],
        &["dataset", "stats"],
        &["dataset", "validate"],
        &["dataset", "export"],
        &["serve"],
    ];
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for path in cases {
        let mut args = path.to_vec();
        args.push("--help");
        let out = forge(&args);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let name = if path.is_empty() { "forge".to_string() } else { path.join("-") };
        let file = dir.join(format!("{name}.txt"));
        if update {
            std::fs::write(&file, &text).unwrap();
        } else {
            let golden = std::fs::read_to_string(&file).unwrap_or_else(|_| panic!("missing {}; run with UPDATE_GOLDEN=1", file.display()));
            assert_eq!(text, golden, "help for {path:?} changed; rerun with UPDATE_GOLDEN=1 if intended");
        }
    }
}

#[test]
fn pipeline_run_produces_one_of_each_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.jsonl");
    let stats = dir.path().join("stats.json");
    let images = dir.path().join("images");
    let summary = forge_ok(&[
        "pipeline", "run", "--mock", "--input", s(&fixture("samples.jsonl")), "--out", s(&out),
        "--stats", s(&stats), "--images", s(&images), "--parallel", "3",
    ]);
    assert_eq!(summary["written"], 3);
    let st: Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!((st["direct"].clone(), st["reflection"].clone(), st["multi_step"].clone()), (1.into(), 1.into(), 1.into()));
    assert!(std::fs::read_dir(&images).unwrap().count() > 0);
}

#[test]
fn mock_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("samples4.jsonl");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["pipeline", "run", "--mock", "--input", s(&input), "--out", s(&out)];
        args.extend_from_slice(extra);
        forge_ok(&args);
        std::fs::read(out).unwrap()
    };
    let ts = ["--seed", "7", "--timestamp", "2025-03-01T12:00:00Z"];
    assert_eq!(run("a.jsonl", &ts), run("b.jsonl", &ts));
    assert_eq!(run("c.jsonl", &["--parallel", "4", ts[0], ts[1], ts[2], ts[3]]), run("a.jsonl", &ts));
    assert_ne!(run("d.jsonl", &["--seed", "8", ts[2], ts[3]]), run("a.jsonl", &ts));
}

#[test]
fn rewards_score_reproduces_worked_group() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    forge_ok(&["rewards", "score", "--group", s(&fixture("reward_group.jsonl")), "--out", s(&out)]);
    let v: Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().trim()).unwrap();
    assert_eq!(v["group_id"], "worked-example");
    let finals: Vec<f64> = v["breakdowns"].as_array().unwrap().iter().map(|b| b["r_final"].as_f64().unwrap()).collect();
    for (got, want) in finals.iter().zip([0.95 + 1.0 / 3.0, 1.93, 0.80]) {
        assert!((got - want).abs() < 1e-9, "{finals:?}");
    }
}

#[test]
fn masks_compile_skips_filtered() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    forge_ok(&["pipeline", "run", "--mock", "--input", s(&fixture("samples4.jsonl")), "--out", s(&data)]);
    let masks = dir.path().join("m.jsonl");
    let summary = forge_ok(&["masks", "compile", "--dataset", s(&data), "--out", s(&masks)]);
    assert_eq!(summary["masks"], 3);
    assert_eq!(summary["skipped_filtered"], 1);
    assert_eq!(std::fs::read_to_string(&masks).unwrap().lines().count(), 3);
}

#[test]
fn validate_reports_the_mutated_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    forge_ok(&["pipeline", "run", "--mock", "--input", s(&fixture("samples.jsonl")), "--out", s(&data)]);
    let ok = forge_ok(&["dataset", "validate", "--dataset", s(&data)]);
    assert_eq!(ok["invalid"], 0);

    let text = std::fs::read_to_string(&data).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: Value = serde_json::from_str(&lines[1]).unwrap();
    rec["segments"].as_array_mut().unwrap().remove(2);
    lines[1] = rec.to_string();
    std::fs::write(&data, lines.join("\n") + "\n").unwrap();

    let out = forge(&["dataset", "validate", "--dataset", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["invalid"], 1);
    assert_eq!(report["problems"][0]["line"], 2);
    assert_eq!(error_line(&out)["error"]["kind"], "invalid");
}

#[test]
fn stats_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    forge_ok(&["pipeline", "run", "--mock", "--input", s(&fixture("samples4.jsonl")), "--out", s(&data)]);
    let st = forge_ok(&["dataset", "stats", "--dataset", s(&data)]);
    assert_eq!(st["total"], 4);
    assert_eq!(st["modes"]["filtered"], 1);
    assert_eq!(st["verification"]["pending"], 4);
    assert_eq!(st["unknown_categories"], Value::Array(vec![]));

    let out = dir.path().join("retained.jsonl");
    let ex = forge_ok(&["dataset", "export", "--dataset", s(&data), "--out", s(&out)]);
    assert_eq!(ex["exported"], 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn exit_codes() {
    let out = forge(&["pipeline", "run", "--mock"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");

    let out = forge(&["pipeline", "run", "--input", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2), "backend choice is required");

    let out = forge(&["dataset", "stats", "--dataset", "/nonexistent/d.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "io");

    let out = forge(&["pipeline", "run", "--mock", "--input", "/nonexistent/in.jsonl", "--out", "/tmp/x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));

    let out = forge(&["--timestamp", "yesterday", "dataset", "stats", "--dataset", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_is_strict_and_applied() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"rewardz": {}}"#).unwrap();
    let out = forge(&["--config", s(&bad), "dataset", "stats", "--dataset", "x"]);
    assert_eq!(out.status.code(), Some(2));

    // A tighter reflection budget turns the fail:2 sample into a filtered one.
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"pipeline": {"max_reflection_iters": 1}}"#).unwrap();
    let data = dir.path().join("d.jsonl");
    let summary = forge_ok(&["--config", s(&cfg), "pipeline", "run", "--mock", "--input", s(&fixture("samples.jsonl")), "--out", s(&data)]);
    assert_eq!(summary["stats"]["reflection"], 0);
    assert_eq!(summary["stats"]["filtered"]["other"], 1);
}
