use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn slamkn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slamkn")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr_json(o: &Output) -> Value {
    assert!(!o.status.success());
    serde_json::from_slice(&o.stderr).expect("stderr is JSON")
}

fn write(dir: &Path, name: &str, v: &Value) {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn d2(l: usize, noise: Value) -> Value {
    json!({
        "scenario": { "landmarks": 5, "landmark_box": 30, "speed": 1.0, "horizon": 50, "trajectories": l, "seed": 1 },
        "noise": noise
    })
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d2.json", &d2(20, json!({ "kind": "fixed", "sigma_w2": 1e-3, "sigma_v2": 1e-3, "q2": 10.0, "r2": 1e3 })));
    for out in ["a.ds", "b.ds"] {
        let o = slamkn(&["generate", "--config", "d2.json", "--seed", "7", "--out", out], dir.path());
        assert_eq!(stdout_json(&o)["seed"], 7);
    }
    let a = std::fs::read(dir.path().join("a.ds")).unwrap();
    let b = std::fs::read(dir.path().join("b.ds")).unwrap();
    assert_eq!(a, b);
    let o = slamkn(&["generate", "--config", "d2.json", "--seed", "8", "--out", "c.ds"], dir.path());
    assert!(o.status.success());
    assert_ne!(a, std::fs::read(dir.path().join("c.ds")).unwrap());

    let info = stdout_json(&slamkn(&["inspect", "a.ds"], dir.path()));
    assert_eq!(info["kind"], "dataset");
    assert_eq!(info["header"]["trajectories"], 20);
}

#[test]
fn ekf_on_noiseless_data_reports_perfect() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "eval.json", &json!({ "estimator": "A1", "dataset": d2(5, json!({ "kind": "noiseless" })) }));
    let o = slamkn(&["evaluate", "--config", "eval.json", "--out", "row.csv", "--trace", "trace.csv"], dir.path());
    let v = stdout_json(&o);
    assert_eq!(v["status"], "perfect");
    assert_eq!(v["mu_db"], Value::Null);
    let csv = std::fs::read_to_string(dir.path().join("row.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",A1,perfect,perfect,"), "{csv}");
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2 * 51);
}

#[test]
fn malformed_config_is_a_usage_error_with_position() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"scenario\": {},\n  \"noise\": {\"kind\": \"noiseless\"}\n}").unwrap();
    let o = slamkn(&["generate", "--config", "bad.json", "--out", "x.ds"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    assert_eq!(e["line"], 2);
    assert!(e["message"].as_str().unwrap().contains("missing field"), "{e}");

    let o = slamkn(&["generate", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");

    let o = slamkn(&["generate", "--config", "missing.json", "--out", "x.ds"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "io");
}

#[test]
fn missing_checkpoint_is_a_resolution_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = serde_json::to_value(slamkn_bench::ExperimentSpec::table2(4, 1)).unwrap();
    spec["models"] = json!({ "a3": "nowhere.ckpt" });
    write(dir.path(), "spec.json", &spec);
    let o = slamkn(&["sweep", "--config", "spec.json", "--out", "res"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "resolution");
    assert_eq!(e["estimator"], "A3");
}

#[test]
fn mismatched_ekf_is_dominated_across_the_observation_noise_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = slamkn_bench::ExperimentSpec::table2(500, 3);
    spec.estimators = vec![slamkn_bench::Estimator::A1, slamkn_bench::Estimator::A2];
    write(dir.path(), "spec.json", &serde_json::to_value(&spec).unwrap());
    stdout_json(&slamkn(&["sweep", "--config", "spec.json", "--out", "res"], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("res/results.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    for pair in rows.chunks(2) {
        assert_eq!((pair[0][3], pair[1][3]), ("A1", "A2"));
        let a1: f64 = pair[0][4].parse().unwrap();
        let a2: f64 = pair[1][4].parse().unwrap();
        assert!(a2 >= a1, "row {}: A2 {a2} < A1 {a1}", pair[0][2]);
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rows"].as_array().unwrap().len(), 12);
    assert!(manifest["sigma_definition"].as_str().unwrap().contains("dB"));
}

#[test]
fn train_then_sweep_with_learned_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let train_ds = json!({
        "scenario": { "landmarks": 2, "landmark_box": 10, "speed": 5.0, "horizon": 6, "trajectories": 12, "seed": 2 },
        "noise": { "kind": "log_uniform", "min": 5e-4, "max": 5e-2, "q2": 10.0, "r2": 1e3 }
    });
    let small = json!({ "epochs": 1, "max_cycles": 1, "batch_size": 4, "norm_samples": 8 });
    write(dir.path(), "a3.json", &json!({ "estimator": "A3", "dataset": train_ds, "kalmannet": { "hidden_dim": 4, "train": small } }));
    write(
        dir.path(),
        "a4.json",
        &json!({ "estimator": "A4", "dataset": train_ds, "split": { "g1_hidden": 4, "g2_hidden": 4, "train": small } }),
    );
    for (cfg, out) in [("a3.json", "m/a3.ckpt"), ("a4.json", "m/a4.ckpt")] {
        let v = stdout_json(&slamkn(&["train", "--config", cfg, "--seed", "3", "--out", out], dir.path()));
        assert!(v["best_val_loss"].as_f64().unwrap().is_finite());
        assert!(dir.path().join(format!("{out}.log.json")).exists());
    }
    let info = stdout_json(&slamkn(&["inspect", "--config", "m/a4.ckpt"], dir.path()));
    assert_eq!(info["kind"], "checkpoint");
    assert_eq!(info["header"]["tag"], "A4");

    let mut spec = slamkn_bench::ExperimentSpec::table2(5, 1);
    spec.dataset.scenario.landmarks = 2;
    spec.dataset.scenario.landmark_box = 10;
    spec.sweep.values = vec![30.0];
    spec.models.a3 = Some("m/a3.ckpt".into());
    spec.models.a4 = Some("m/a4.ckpt".into());
    write(dir.path(), "spec.json", &serde_json::to_value(&spec).unwrap());
    stdout_json(&slamkn(&["sweep", "--config", "spec.json", "--out", "res"], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("res/results.csv")).unwrap();
    let estimators: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(estimators, ["A1", "A2", "A3", "A4"]);

    // a five-landmark experiment cannot use two-landmark models
    spec.dataset.scenario.landmarks = 5;
    spec.dataset.scenario.landmark_box = 30;
    write(dir.path(), "spec5.json", &serde_json::to_value(&spec).unwrap());
    let o = slamkn(&["sweep", "--config", "spec5.json", "--out", "res5"], dir.path());
    assert_eq!(stderr_json(&o)["error"], "resolution");
}
