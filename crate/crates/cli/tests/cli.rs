use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcexcess"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(args: &[&str]) -> (i32, serde_json::Value) {
    let out = bin().args(args).output().expect("binary runs");
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let line = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("{e}: {line}"));
    (out.status.code().unwrap(), v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every artifact listed in the manifest exists with the recorded hash.
fn check_manifest(dir: &Path, command: &str) {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], command);
    assert!(m["config_sha256"].as_str().unwrap().len() == 64);
    let artifacts = m["artifacts"].as_array().unwrap();
    assert!(!artifacts.is_empty(), "{command}: empty manifest");
    for a in artifacts {
        let bytes = fs::read(dir.join(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"], mcexcess::seed::sha256_hex(&bytes));
    }
}

#[test]
fn stepwise_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |name: &str| tmp.path().join(name);
    run(&["simulate", "--seed", "7", "--out-dir", s(&d("sim")), "--storms", "3", "--units", "30"]);
    check_manifest(&d("sim"), "simulate");
    let config = d("sim").join("config.toml");

    run(&["build-panels", "--config", s(&config), "--out-dir", s(&d("panels"))]);
    check_manifest(&d("panels"), "build-panels");
    assert!(d("panels").join("panel_S03.csv").exists());

    let out = run(&["select-k", "--seed", "7", "--panels", s(&d("panels")), "--target", "0.70", "--out-dir", s(&d("k"))]);
    let rec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rec["k"].as_u64().unwrap() <= 3, "{rec}");
    check_manifest(&d("k"), "select-k");

    let fit = |dir: &str| {
        run(&[
            "--threads", "2", "fit-causal", "--seed", "11", "--panels", s(&d("panels")), "--out-dir", s(&d(dir)),
            "--k", "2", "--draws", "40", "--warmup", "60",
        ])
    };
    fit("fit_a");
    fit("fit_b");
    for storm in ["S01", "S02", "S03"] {
        let name = format!("posterior_{storm}.csv");
        assert_eq!(fs::read(d("fit_a").join(&name)).unwrap(), fs::read(d("fit_b").join(&name)).unwrap());
    }
    assert_eq!(fs::read(d("fit_a").join("manifest.json")).unwrap(), fs::read(d("fit_b").join("manifest.json")).unwrap());
    check_manifest(&d("fit_a"), "fit-causal");
    let effects = d("fit_a").join("effect_draws.csv");

    let out = run(&["estimands", "--seed", "11", "--panels", s(&d("panels")), "--effects", s(&effects), "--out-dir", s(&d("est"))]);
    let study: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(study["n_storms"], 3);
    check_manifest(&d("est"), "estimands");

    let predictors = d("sim").join("predictors.csv");
    run(&[
        "fit-predictive", "--seed", "11", "--panels", s(&d("panels")), "--effects", s(&effects),
        "--predictors", s(&predictors), "--variant", "linear", "--out-dir", s(&d("pred")),
    ]);
    check_manifest(&d("pred"), "fit-predictive");

    run(&[
        "cv", "--seed", "11", "--panels", s(&d("panels")), "--effects", s(&effects),
        "--predictors", s(&predictors), "--variant", "linear", "--out-dir", s(&d("cv")),
    ]);
    let table = fs::read_to_string(d("cv").join("cv_rmse.csv")).unwrap();
    assert!(table.starts_with("variant,deaths\nlinear,"), "{table}");
    check_manifest(&d("cv"), "cv");

    let scenarios = d("scenarios.csv");
    let text = fs::read_to_string(&predictors).unwrap();
    let head: Vec<&str> = text.lines().take(4).collect();
    fs::write(&scenarios, head.join("\n") + "\n").unwrap();
    run(&["predict", "--seed", "3", "--fit", s(&d("pred").join("fit.json")), "--scenarios", s(&scenarios), "--out-dir", s(&d("pr"))]);
    let preds = fs::read_to_string(d("pr").join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 4);
    check_manifest(&d("pr"), "predict");
}

#[test]
fn simulate_then_run_full_and_sensitivity() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    run(&["simulate", "--seed", "7", "--out-dir", s(&sim), "--storms", "4", "--units", "24", "--treated-fraction", "0.5"]);
    let config = sim.join("config.toml");
    let fast = ["--k", "1", "--draws", "30", "--warmup", "50"];
    let out_dir = tmp.path().join("run");
    let mut args = vec!["run-full", "--config", s(&config), "--out-dir", s(&out_dir)];
    args.extend(fast);
    run(&args);
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("predictive/windspeed_curve.svg").exists());
    check_manifest(&out_dir, "run-full");

    let sens = tmp.path().join("sens");
    let mut args = vec!["sensitivity", "--config", s(&config), "--out-dir", s(&sens), "--alt-k", "2", "--drop-adjacent"];
    args.extend(fast);
    run(&args);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(sens.join("sensitivity.json")).unwrap()).unwrap();
    assert_eq!(report["comparisons"].as_array().unwrap().len(), 2);
    check_manifest(&sens, "sensitivity");
}

#[test]
fn failures_are_reported_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());

    let (code, v) = error_json(&["fit-causal", "--seed", "1", "--bogus", "--out-dir", out]);
    assert_eq!((code, v["kind"].as_str()), (2, Some("usage")));

    let (code, v) = error_json(&["fit-causal", "--panels", out, "--out-dir", out]);
    assert_eq!((code, v["kind"].as_str()), (1, Some("config")));

    let (_, v) = error_json(&["predict", "--seed", "1", "--fit", "missing.json", "--scenarios", "x.csv", "--out-dir", out]);
    assert_eq!(v["kind"], "io");

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nk = \"four\"\n").unwrap();
    let (_, v) = error_json(&["run-full", "--config", s(&bad), "--out-dir", out]);
    assert_eq!(v["kind"], "config");

    let (_, v) = error_json(&["fit-causal", "--seed", "1", "--panels", out, "--out-dir", out]);
    assert_eq!(v["kind"], "invalid_input");
}

#[test]
fn help_exits_cleanly() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["simulate", "build-panels", "select-k", "fit-causal", "estimands", "fit-predictive", "cv", "predict", "sensitivity", "run-full"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
