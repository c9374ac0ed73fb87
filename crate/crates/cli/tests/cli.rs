use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn deepmlf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepmlf"))
        .args(args)
        .current_dir(dir)
        .env_remove("DMLF_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = deepmlf(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(dir: &Path, args: &[&str], code: i32, category: &str) {
    let out = deepmlf(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with(&format!("error: {category}: ")), "{stderr}");
}

fn write_json(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p
}

/// A small dataset and a short run config in a fresh directory.
fn workspace() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_json(d, "spec.json", json!({ "n_train": 48, "n_val": 12, "n_test": 12, "seed": 4 }));
    write_json(
        d,
        "config.json",
        json!({ "seed": 1, "train": { "max_epochs": 3, "batch_size": 16 } }),
    );
    ok(d, &["gen-data", "spec.json", "data"]);
    tmp
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_train_eval_end_to_end() {
    let tmp = workspace();
    let d = tmp.path();
    for f in ["meta.json", "train.jsonl", "val.jsonl", "test.jsonl", "spec.json"] {
        assert!(d.join("data").join(f).is_file(), "{f}");
    }

    ok(d, &["train", "config.json", "data", "--out", "run"]);
    let run = d.join("run");
    assert!(run.join("model.ckpt").is_file());
    let resolved: Value = serde_json::from_str(&fs::read_to_string(run.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 1);
    assert_eq!(resolved["train"]["max_epochs"], 3);
    assert_eq!(resolved["av_init"], "random_tune");

    let events = jsonl(&run.join("run.jsonl"));
    let epochs: Vec<&Value> = events.iter().filter(|e| e["event"] == "epoch").collect();
    assert!(!epochs.is_empty() && epochs.len() <= 3);
    for (i, e) in epochs.iter().enumerate() {
        assert_eq!(e["epoch"], i);
        assert!(e["val"]["total"].as_f64().unwrap().is_finite());
    }
    assert_eq!(events.iter().filter(|e| e["event"] == "done").count(), 1);
    let test_event = events.iter().find(|e| e["event"] == "test").expect("test split evaluated");

    let stdout = ok(d, &["eval", "run/model.ckpt", "data"]);
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["model"], "full");
    assert_eq!(report["metrics"]["n"], 12);
    assert_eq!(report["metrics"]["mae"], test_event["mae"]);

    let out = ok(d, &["analyze", "run/model.ckpt", "--data", "data", "--json"]);
    let analysis: Value = serde_json::from_str(&out).unwrap();
    assert!(analysis["probe"].as_array().unwrap().iter().all(|p| p["isolation_holds"] == true));
    assert_eq!(analysis["budget"]["measured_match"], true);
}

#[test]
fn pretrained_snapshot_feeds_a_frozen_encoder() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["pretrain-av", "config.json", "data", "--out", "av"]);
    assert!(d.join("av/av.ckpt").is_file());
    assert!(d.join("av/resolved_config.json").is_file());
    let av_eval: Value = serde_json::from_str(&ok(d, &["eval", "av/av.ckpt", "data", "--split", "val"])).unwrap();
    assert_eq!(av_eval["model"], "av");

    fails_with(d, &["train", "config.json", "data", "--av-init", "pre_tune", "--out", "x"], 3, "config");
    ok(
        d,
        &["train", "config.json", "data", "--av-init", "pre-freeze", "--av-snapshot", "av/av.ckpt", "--out", "run"],
    );
    let resolved = fs::read_to_string(d.join("run/resolved_config.json")).unwrap();
    assert!(resolved.contains("\"pre_freeze\""));
    fails_with(d, &["analyze", "av/av.ckpt"], 6, "checkpoint");
}

#[test]
fn same_seed_writes_identical_checkpoints() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["train", "config.json", "data", "--out", "a"]);
    ok(d, &["train", "config.json", "data", "--out", "b"]);
    ok(d, &["--seed", "9", "train", "config.json", "data", "--out", "c"]);
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/model.ckpt"), read("b/model.ckpt"));
    assert_ne!(read("a/model.ckpt"), read("c/model.ckpt"));
}

#[test]
fn fresh_sigmoid_gates_read_one_half() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_json(d, "config.json", json!({}));
    let out = ok(d, &["analyze", "config.json", "--gates"]);
    let rows: Vec<Vec<&str>> = out
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|c| c.len() == 3 && c[0].parse::<usize>().is_ok())
        .collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), vec!["2", "4"]);
    for r in &rows {
        assert_eq!(r[1].parse::<f32>().unwrap(), 0.5);
        assert_eq!(r[2].parse::<f32>().unwrap(), 0.5);
    }
    assert!(!out.contains("information flow"), "only the requested section");

    write_json(d, "tanh.json", json!({ "model": { "mlm": { "gating": "tanh" } } }));
    let v: Value = serde_json::from_str(&ok(d, &["analyze", "tanh.json", "--gates", "--json"])).unwrap();
    assert!(v["gates"].as_array().unwrap().iter().all(|g| g["attn"] == 0.0 && g["ffw"] == 0.0));
}

#[test]
fn grad_check_passes_on_the_default_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_json(d, "config.json", json!({}));
    ok(d, &["grad-check", "config.json", "--out", "gc"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("gc/grad_check.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_rel_error"].as_f64().unwrap() < 2e-2);
    assert!(d.join("gc/resolved_config.json").is_file());
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    fails_with(d.path(), &["frobnicate"], 2, "usage");
    fails_with(d.path(), &["train", "--bogus-flag", "a", "b"], 2, "usage");
    fails_with(d.path(), &["train", "a", "b", "--av-init", "later"], 2, "usage");
    fails_with(d.path(), &[], 2, "usage");
    assert!(deepmlf(d.path(), &["--help"]).status.success());
}

#[test]
fn configuration_errors_exit_3() {
    let tmp = workspace();
    let d = tmp.path();
    write_json(d, "typo.json", json!({ "train": { "learning_rate": 0.1 } }));
    fails_with(d, &["train", "typo.json", "data"], 3, "config");
    write_json(d, "bad.json", json!({ "model": { "mlm": { "d_model": 30, "n_heads": 4 } } }));
    fails_with(d, &["grad-check", "bad.json"], 3, "config");
    fs::write(d.join("broken.json"), "{ not json").unwrap();
    fails_with(d, &["analyze", "broken.json"], 3, "config");
    write_json(d, "narrow.json", json!({ "model": { "av": { "d_a_in": 4 } } }));
    fails_with(d, &["train", "narrow.json", "data"], 3, "config");
    fails_with(d, &["grid", "config.json", "--axes", "depth"], 3, "config");
    write_json(d, "badspec.json", json!({ "w_t": 0.9, "w_av": 0.9 }));
    fails_with(d, &["gen-data", "badspec.json", "out"], 3, "config");
}

#[test]
fn data_checkpoint_and_io_errors_have_their_own_codes() {
    let tmp = workspace();
    let d = tmp.path();
    fs::create_dir(d.join("empty")).unwrap();
    fails_with(d, &["train", "config.json", "empty"], 4, "data");
    fs::write(d.join("junk.ckpt"), b"DMLF\x07").unwrap();
    fails_with(d, &["eval", "junk.ckpt", "data"], 6, "checkpoint");
    fails_with(d, &["train", "missing.json", "data"], 7, "io");
}

#[test]
fn seed_flag_beats_env_beats_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_json(d, "spec.json", json!({ "n_train": 4, "n_val": 2, "n_test": 2, "seed": 3 }));
    let seed_of = |dir: &str| -> Value {
        serde_json::from_str::<Value>(&fs::read_to_string(d.join(dir).join("spec.json")).unwrap()).unwrap()["seed"].clone()
    };
    let run = |env: Option<&str>, args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_deepmlf"));
        cmd.args(args).current_dir(d).env_remove("DMLF_SEED");
        if let Some(v) = env {
            cmd.env("DMLF_SEED", v);
        }
        cmd.output().unwrap()
    };
    assert!(run(None, &["gen-data", "spec.json", "cfg"]).status.success());
    assert!(run(Some("5"), &["gen-data", "spec.json", "env"]).status.success());
    assert!(run(Some("5"), &["--seed", "7", "gen-data", "spec.json", "flag"]).status.success());
    assert_eq!((seed_of("cfg"), seed_of("env"), seed_of("flag")), (json!(3), json!(5), json!(7)));

    let bad = run(Some("soon"), &["gen-data", "spec.json", "x"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error: config: "));
}

#[test]
fn grid_writes_one_config_per_point() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["grid", "config.json", "--axes", "n_f", "gating", "--out", "g"]);
    let manifest: Vec<Value> = serde_json::from_str(&fs::read_to_string(d.join("g/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.len(), 12);
    for m in &manifest {
        let path = d.join("g").join(m["id"].as_str().unwrap()).join("resolved_config.json");
        let cfg: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(cfg["seed"], 1);
    }

    write_json(d, "short.json", json!({ "seed": 1, "train": { "max_epochs": 2, "batch_size": 24 } }));
    let out = ok(d, &["grid", "short.json", "--axes", "n_f=2,4", "--data", "data", "--out", "t"]);
    let manifest: Vec<Value> = serde_json::from_str(&fs::read_to_string(d.join("t/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.len(), 2);
    for m in &manifest {
        assert!(m["summary"]["test"]["mae"].as_f64().unwrap().is_finite());
        assert!(d.join("t").join(m["id"].as_str().unwrap()).join("model.ckpt").is_file());
        assert!(out.contains(m["id"].as_str().unwrap()));
    }
}
