use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "seed": 7,
  "data": {"source": "desk", "n_samples": 40, "n_steps": 8, "n_features": 3},
  "train": {"epochs": 2, "batch_size": 16, "learning_rate": 0.005,
            "model": {"d_model": 4, "n_heads": 2, "d_hidden": 8}}
}"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        fs::write(ws.path("cfg.json"), CONFIG).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_csai"));
        cmd.current_dir(self.dir.path()).args(args).env_remove("CSAI_OUT_DIR").env_remove("CSAI_THREADS");
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(name)).unwrap()).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn generate_writes_dataset_and_manifest() {
    let ws = Workspace::new();
    let o = ws.run(&["generate", "--config", "cfg.json", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = ws.json("data/manifest.json");
    assert_eq!(m["kind"], "generate");
    assert_eq!(m["result"]["n_samples"], 40);
    assert_eq!(m["config"]["seed"], 7);
    assert_eq!(csv_rows(&ws.path("data/data.csv")), 40 * 8);
    assert!(ws.path("data/truth.csv").exists());
}

#[test]
fn generated_tables_feed_a_table_experiment() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["generate", "--config", "cfg.json", "--out", "data"])), 0);
    let table_cfg = format!(
        r#"{{"seed": 1, "data": {{"source": "table", "path": "{}"}}, "out_dir": "tab"}}"#,
        ws.path("data/data.csv").display()
    );
    fs::write(ws.path("table.json"), table_cfg).unwrap();
    let o = ws.run(&["preprocess", "--config", "table.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let p = ws.json("tab/preprocess.json");
    assert_eq!(p["result"]["tau"].as_array().unwrap().len(), 3);
    // generating from a table source is a validation error
    assert_eq!(code(&ws.run(&["generate", "--config", "table.json"])), 1);
}

#[test]
fn missing_config_is_a_validation_error_naming_the_path() {
    let ws = Workspace::new();
    let o = ws.run(&["train", "--config", "nope.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn usage_errors_exit_one() {
    let ws = Workspace::new();
    let o = ws.run(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&ws.run(&["train", "--config", "cfg.json", "--no-such-flag"])), 1);
    assert_eq!(code(&ws.run(&["train", "--config", "cfg.json", "--rate", "1.5"])), 1);
    assert_eq!(code(&ws.run(&["ablate", "--config", "cfg.json", "--axis", "depth", "--values", "1"])), 1);
    assert_eq!(code(&ws.run(&["--help"])), 0);
}

#[test]
fn train_then_evaluate_agree_and_replay_byte_identically() {
    let ws = Workspace::new();
    let o = ws.run(&["train", "--config", "cfg.json", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = fs::read(ws.path("a/train.json")).unwrap();
    assert_eq!(code(&ws.run(&["train", "--config", "cfg.json", "--out", "a"])), 0);
    assert_eq!(first, fs::read(ws.path("a/train.json")).unwrap());

    let o = ws.run(&["evaluate", "--config", "cfg.json", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = ws.json("a/train.json");
    let e = ws.json("a/evaluate.json");
    assert_eq!(t["result"]["test"], e["result"]["test"]);
    assert_eq!(t["config"], e["config"]);
    assert_eq!(t["config"]["train"]["seed"], 7);
    assert_eq!(csv_rows(&ws.path("a/history.csv")), 3);
}

#[test]
fn flags_and_environment_override_the_config() {
    let ws = Workspace::new();
    let o = ws.run_env(&["mask", "--config", "cfg.json", "--rate", "0.2", "--seed", "3"], &[("CSAI_OUT_DIR", "env-out")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = ws.json("env-out/mask.json");
    assert_eq!(m["config"]["seed"], 3);
    assert_eq!(m["config"]["train"]["masking"]["rate"], 0.2);
    assert_eq!(m["result"].as_array().unwrap().len(), 3);
    // the flag beats the environment
    let o = ws.run_env(&["mask", "--config", "cfg.json", "--out", "flag-out"], &[("CSAI_OUT_DIR", "env-out2")]);
    assert_eq!(code(&o), 0);
    assert!(ws.path("flag-out/mask.json").exists() && !ws.path("env-out2").exists());
    assert_eq!(code(&ws.run_env(&["mask", "--config", "cfg.json"], &[("CSAI_THREADS", "zero")])), 1);
}

#[test]
fn thread_count_does_not_change_results() {
    let ws = Workspace::new();
    for (threads, out) in [("1", "t1"), ("4", "t4")] {
        let o = ws.run_env(&["train", "--cv", "--config", "cfg.json", "--out", out], &[("CSAI_THREADS", threads)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let strip = |v: Value| v["result"].clone();
    assert_eq!(strip(ws.json("t1/cv.json")), strip(ws.json("t4/cv.json")));
}

#[test]
fn audit_shows_legacy_under_masking() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["audit", "--config", "cfg.json", "--out", "a"])), 0);
    let a = ws.json("a/audit.json");
    for split in a["result"].as_array().unwrap() {
        let legacy = split["uniform_legacy"]["realized_rate"].as_f64().unwrap();
        let corrected = split["uniform_corrected"]["realized_rate"].as_f64().unwrap();
        assert!(legacy < corrected, "{legacy} vs {corrected}");
    }
}

#[test]
fn factor_ablation_has_one_row_per_value_and_replays() {
    let ws = Workspace::new();
    let args = ["ablate", "--config", "cfg.json", "--out", "abl", "--axis", "factor", "--values", "0,5,10"];
    let o = ws.run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = fs::read(ws.path("abl/ablation.json")).unwrap();
    assert_eq!(csv_rows(&ws.path("abl/ablation_summary.csv")), 3);
    assert_eq!(csv_rows(&ws.path("abl/sweep.csv")), 3);
    assert_eq!(csv_rows(&ws.path("abl/ablation_folds.csv")), 15);
    let r = ws.json("abl/ablation.json");
    assert_eq!(r["result"]["config"], r["config"]["train"]);
    assert_eq!(code(&ws.run(&args)), 0);
    assert_eq!(first, fs::read(ws.path("abl/ablation.json")).unwrap());
}

#[test]
fn report_tables_round_trip_through_json() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["train", "--config", "cfg.json", "--out", "a"])), 0);
    let o = ws.run(&["report", "--input", "a/train.json", "--format", "json", "--output", "h.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&ws.run(&["report", "--input", "h.json", "--format", "table", "--output", "h.csv"])), 0);
    assert_eq!(code(&ws.run(&["report", "--input", "h.csv", "--format", "json", "--output", "h2.json"])), 0);
    assert_eq!(ws.json("h.json"), ws.json("h2.json"));
    assert_eq!(fs::read(ws.path("h.csv")).unwrap(), fs::read(ws.path("a/history.csv")).unwrap());
    // a train report has no sweep
    assert_eq!(code(&ws.run(&["report", "--input", "a/train.json", "--table", "sweep"])), 1);
}

#[test]
fn empty_tables_and_unwritable_paths() {
    let ws = Workspace::new();
    fs::write(ws.path("empty.csv"), "epoch,val_mae\n").unwrap();
    let o = ws.run(&["report", "--input", "empty.csv", "--format", "json", "--output", "empty.json"]);
    assert_eq!(code(&o), 0);
    assert_eq!(ws.json("empty.json")["rows"].as_array().unwrap().len(), 0);
    let o = ws.run(&["report", "--input", "empty.csv", "--output", "missing-dir/x/y.csv"]);
    assert_eq!(code(&o), 2);
}
