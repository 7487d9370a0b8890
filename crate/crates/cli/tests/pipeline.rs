use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use allpairs::io::{save_model, ModelFile};
use allpairs::{BiLipConfig, BiLipMap};
use serde_json::Value;
use tempfile::TempDir;

fn allpairs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_allpairs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = allpairs(args);
    assert!(
        out.status.success(),
        "allpairs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&[
        "gen-data", "--seed", "3", "--safe-count", "60", "--unsafe-count", "60", "--out", s(dir),
    ]);
}

fn small_model(data: &Path, out: &Path) {
    ok(&[
        "train", "--data", s(data), "--out", s(out), "--seed", "5", "--epochs", "1", "--pairs", "1", "--width", "4",
    ]);
}

#[test]
fn gen_data_minimal_counts() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    ok(&["gen-data", "--seed", "1", "--safe-count", "1", "--unsafe-count", "1", "--out", s(&dir)]);
    let summary = json(&dir.join("summary.json"));
    assert_eq!(summary["m"], 1);
    assert_eq!(summary["n"], 1);
    assert!(summary["version"].as_str().unwrap().starts_with("allpairs/"));
    assert_eq!(summary["config"]["safe_count"], 1);
    let lines = fs::read_to_string(dir.join("samples.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    assert!(dir.join("env.json").exists());
}

#[test]
fn goal_inside_obstacle_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let out = allpairs(&[
        "gen-data", "--seed", "1", "--goal", "1.0,0.5", "--out", s(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("goal unsafe"));
}

#[test]
fn seed_is_mandatory() {
    let tmp = TempDir::new().unwrap();
    let out = allpairs(&["gen-data", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn single_epoch_training_writes_one_history_row() {
    let tmp = TempDir::new().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    small_dataset(&data);
    small_model(&data, &model);
    let csv = fs::read_to_string(model.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,total,safe,unsafe,task"));
    let m = json(&model.join("model.json"));
    assert_eq!(m["config"]["epochs"], 1);
    assert!(m["mu"].as_f64().unwrap() > 0.0);
    let report = json(&model.join("report.json"));
    assert!(report["version"].is_string());
    assert!(report["report"].get("wall_clock_seconds").is_none());
}

#[test]
fn plan_from_goal_stays_put() {
    let tmp = TempDir::new().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    small_dataset(&data);
    small_model(&data, &model);
    for method in ["analytic", "rk4", "finite-time", "gradient-baseline"] {
        let traj = tmp.path().join(format!("{method}.json"));
        ok(&[
            "plan", "--model", s(&model.join("model.json")), "--start", "1.5,1.0", "--goal", "1.5,1.0",
            "--method", method, "--t-end", "1", "--out", s(&traj),
        ]);
        let t = json(&traj);
        assert_eq!(t["method"], method);
        for x in t["states"].as_array().unwrap() {
            let x: Vec<f64> = serde_json::from_value(x.clone()).unwrap();
            assert!((x[0] - 1.5).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8, "{method}: {x:?}");
        }
    }
}

#[test]
fn plan_follows_waypoint_goal() {
    let tmp = TempDir::new().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    small_dataset(&data);
    small_model(&data, &model);
    let path = tmp.path().join("path.json");
    fs::write(&path, r#"{"times": [0, 2], "points": [[1.5, 1.0], [1.5, 1.2]]}"#).unwrap();
    let traj = tmp.path().join("t.json");
    ok(&[
        "plan", "--model", s(&model.join("model.json")), "--start", "1.4,1.0", "--goal-path", s(&path),
        "--method", "rk4", "--t-end", "2", "--out", s(&traj),
    ]);
    let t = json(&traj);
    assert_eq!(t["method"], "tracking");
    assert_eq!(t["goal_samples"].as_array().unwrap().len(), t["times"].as_array().unwrap().len());
}

#[test]
fn plan_rejects_both_goal_kinds() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("model.json");
    save_model(&model, &identity_model()).unwrap();
    let out = allpairs(&[
        "plan", "--model", s(&model), "--start", "0,0", "--goal", "0,0", "--goal-path", s(&model), "--out",
        s(&tmp.path().join("t.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn identity_model() -> ModelFile {
    let mut map = BiLipMap::identity(2, &BiLipConfig::default());
    map.set_goal_center(&allpairs::bilip::state(&[0.0, 0.0]));
    ModelFile::from_map(&map, 1.0, None, Value::Null)
}

#[test]
fn verify_identity_model_passes() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("model.json");
    save_model(&model, &identity_model()).unwrap();
    let report = tmp.path().join("verify.json");
    ok(&[
        "verify", "--model", s(&model), "--bilip-pairs", "2000", "--inverse-samples", "200", "--barrier-samples",
        "500", "--exterior-samples", "100", "--rollouts", "10", "--grid", "30", "--out", s(&report),
    ]);
    let r = json(&report);
    assert_eq!(r["pass"], true);
    let checks = r["checks"].as_array().unwrap();
    assert!(checks.len() >= 10);
    for c in checks {
        assert_eq!(c["pass"], true, "{}", c["name"]);
    }
    assert!(checks.iter().any(|c| c["name"] == "example1-counterexample"));
}

#[test]
fn verify_rejects_tampered_model() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("model.json");
    let mut m = identity_model();
    m.mu *= 2.0;
    fs::write(&model, serde_json::to_string(&m).unwrap()).unwrap();
    let out = allpairs(&["verify", "--model", s(&model), "--out", s(&tmp.path().join("v.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_plots_draws_one_polyline_per_trajectory() {
    let tmp = TempDir::new().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    small_dataset(&data);
    small_model(&data, &model);
    let mut trajs = Vec::new();
    for (k, start) in ["0.3,0.3", "2.7,1.7", "1.5,0.3"].iter().enumerate() {
        let t = tmp.path().join(format!("t{k}.json"));
        ok(&[
            "plan", "--model", s(&model.join("model.json")), "--start", start, "--goal", "1.5,1.0", "--out", s(&t),
        ]);
        trajs.push(t);
    }
    let plots = tmp.path().join("plots");
    let model_file = model.join("model.json");
    let mut args = vec!["export-plots", "--model", s(&model_file), "--data", s(&data)];
    for t in &trajs {
        args.extend(["--trajectory", s(t)]);
    }
    args.extend(["--resolution", "60", "--out", s(&plots)]);
    ok(&args);
    let svg = fs::read_to_string(plots.join("workspace.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert!(svg.contains(r#"class="contour""#));
    assert_eq!(fs::read_to_string(plots.join("zspace.svg")).unwrap().matches("<polyline").count(), 3);
    let data = json(&plots.join("plot_data.json"));
    assert_eq!(data["trajectories"].as_array().unwrap().len(), 3);
    assert!(data["version"].is_string());
}

#[test]
fn config_file_overrides_defaults_but_not_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"safe_count": 7, "unsafe_count": 9}"#).unwrap();
    let dir = tmp.path().join("d");
    ok(&[
        "--config", s(&cfg), "gen-data", "--seed", "2", "--unsafe-count", "4", "--out", s(&dir),
    ]);
    let summary = json(&dir.join("summary.json"));
    assert_eq!(summary["m"], 7);
    assert_eq!(summary["n"], 4);

    fs::write(&cfg, r#"{"no_such_flag": 1}"#).unwrap();
    let out = allpairs(&["--config", s(&cfg), "gen-data", "--seed", "2", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    // Files embed their invoking config, paths included, so both runs use
    // the same relative paths from different working directories.
    let run = || {
        let tmp = TempDir::new().unwrap();
        let at = |args: &[&str]| {
            let out = Command::new(env!("CARGO_BIN_EXE_allpairs"))
                .args(args)
                .current_dir(tmp.path())
                .env("RUST_LOG", "warn")
                .output()
                .unwrap();
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        };
        at(&["gen-data", "--seed", "3", "--safe-count", "60", "--unsafe-count", "60", "--out", "d"]);
        at(&["train", "--data", "d", "--out", "m", "--seed", "5", "--epochs", "2", "--pairs", "1", "--width", "4"]);
        at(&["plan", "--model", "m/model.json", "--start", "0.3,0.3", "--goal", "2.7,1.7", "--out", "t.json"]);
        at(&["verify", "--model", "m/model.json", "--preset", "corridor-v1", "--bilip-pairs", "500",
            "--inverse-samples", "50", "--barrier-samples", "50", "--exterior-samples", "20", "--rollouts", "5",
            "--grid", "10", "--skip-example1", "--out", "v.json"]);
        ["d/samples.jsonl", "d/summary.json", "m/model.json", "m/report.json", "m/loss.csv", "t.json", "v.json"]
            .map(|f| fs::read(tmp.path().join(f)).unwrap())
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert!(x == y);
    }
}
