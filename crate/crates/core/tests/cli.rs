use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn eqplan(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqplan"))
        .args(args)
        .current_dir(dir)
        .env_remove("EQPM_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = r#"{
  "dataset": { "n_tasks": 60, "n_scenes": 4 },
  "model": { "d_model": 16, "heads": 2, "blocks": 1, "ffn_hidden": 32 },
  "training": { "iterations": 1, "batch_size": 16, "warmup_epochs": 1, "wm_epochs": 1, "task_cap": 6 },
  "evaluation": { "splits": ["novel_task", "train"], "max_tasks": 3 },
  "seeds": { "seed": 5 },
  "paths": { "out_dir": "run" }
}"#;

fn small_run(dir: &Path) {
    std::fs::write(dir.join("cfg.json"), SMALL).unwrap();
    for cmd in [&["gen-tasks"][..], &["train"], &["train-world-model"]] {
        let mut args = cmd.to_vec();
        args.extend(["--config", "cfg.json"]);
        let out = eqplan(&args, dir);
        assert!(out.status.success(), "{cmd:?}: {}", stderr(&out));
    }
}

#[test]
fn gradcheck_scalar_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqplan(&["gradcheck", "--suite", "scalar", "--seeds", "3"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["passed"] == true && r["family"] == "scalar"));
}

#[test]
fn usage_errors_exit_two_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(eqplan(&["eval", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(eqplan(&["eval", "--feedback", "telepathy"], dir.path()).status.code(), Some(2));
    assert_eq!(eqplan(&[], dir.path()).status.code(), Some(2));
    assert_eq!(eqplan(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(eqplan(&["--version"], dir.path()).status.code(), Some(0));
}

#[test]
fn config_errors_name_the_key_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"training": {"learning_rat": 0.1}}"#).unwrap();
    let out = eqplan(&["gen-tasks", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("training"), "{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));

    std::fs::write(dir.path().join("bad.json"), r#"{"planner": {"outer_bound": "ten"}}"#).unwrap();
    let out = eqplan(&["gen-tasks", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("planner.outer_bound"), "{}", stderr(&out));
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_eqplan"))
        .args(["gen-tasks", "--config", "cfg.json"])
        .current_dir(dir.path())
        .env("EQPM_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("run/dataset.jsonl")).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["seed"], 11);

    let out = Command::new(env!("CARGO_BIN_EXE_eqplan"))
        .args(["gen-tasks", "--config", "cfg.json"])
        .current_dir(dir.path())
        .env("EQPM_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_smoke_and_report_regeneration() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_run(dir);
    let run = dir.join("run");
    for f in ["dataset.jsonl", "refiner.eqpm", "refiner.eqpm.json", "memory.jsonl", "memory.jsonl.json", "metrics.jsonl", "worldmodel.eqpm"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let out = eqplan(
        &["eval", "--config", "cfg.json", "--feedback", "both", "--max-corrections", "2", "--jobs", "2"],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert_eq!(report["feedback"], "both");
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 16);
    let splits = report["splits"].as_array().unwrap();
    assert_eq!(splits.len(), 2);
    for s in splits {
        assert_eq!(s["n_tasks"], 3);
        for key in ["exec", "sr", "gcr"] {
            let v = s[key].as_f64().unwrap();
            assert!((0.0..=100.0).contains(&v), "{key} = {v}");
        }
        assert!(s["mean_env_interactions"].as_f64().unwrap() >= 1.0);
    }
    let csv = std::fs::read_to_string(run.join("scaling.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("task_id,split,refiner_calls,success"));
    assert_eq!(csv.lines().count(), 7);
    let trace = std::fs::read_to_string(run.join("trace.jsonl")).unwrap();
    let header: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(header["feedback"], "both");
    assert!(trace.lines().count() > 6);

    let before_report = std::fs::read(run.join("report.json")).unwrap();
    let before_csv = std::fs::read(run.join("scaling.csv")).unwrap();
    std::fs::remove_file(run.join("report.json")).unwrap();
    let out = eqplan(&["report", "--episodes", "run/episodes.jsonl"], dir);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(run.join("report.json")).unwrap(), before_report);
    assert_eq!(std::fs::read(run.join("scaling.csv")).unwrap(), before_csv);

    // A different planner setting leaves the trained weights valid, so no
    // warning; different training settings do warn.
    let out = eqplan(&["eval", "--config", "cfg.json", "--feedback", "none"], dir);
    assert!(out.status.success());
    assert!(!stderr(&out).contains("warning"), "{}", stderr(&out));
    let changed = SMALL.replace("\"iterations\": 1", "\"iterations\": 2");
    std::fs::write(dir.join("cfg2.json"), changed).unwrap();
    let out = eqplan(&["eval", "--config", "cfg2.json", "--feedback", "none"], dir);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("warning"), "{}", stderr(&out));

    // Truncated weights are a runtime error, not a panic.
    let bytes = std::fs::read(run.join("refiner.eqpm")).unwrap();
    std::fs::write(run.join("refiner.eqpm"), &bytes[..bytes.len() / 2]).unwrap();
    let out = eqplan(&["eval", "--config", "cfg.json", "--feedback", "env"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("refiner.eqpm"), "{}", stderr(&out));
}

#[test]
fn eval_requires_a_world_model_file_for_wm_feedback() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_run(dir);
    let out = eqplan(&["eval", "--config", "cfg.json", "--feedback", "wm", "--world-model", "missing.eqpm"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.eqpm"), "{}", stderr(&out));
}

#[test]
fn bench_fixedpoint_reports_every_solver() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqplan(&["bench-fixedpoint", "--count", "4", "--max-dim", "8"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["iterations"].as_array().unwrap().len() == 3));
}
