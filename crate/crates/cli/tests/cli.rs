use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn regbase(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regbase"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = regbase(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_config(dir: &Path, sigma_baseline: f64) -> String {
    let mut c: Value = serde_json::to_value(regbase::synth::SynthConfig::default()).unwrap();
    c["n_subjects"] = 6.into();
    c["n_items"] = 8.into();
    c["sigma_baseline"] = sigma_baseline.into();
    c["sample_noise_sd"] = 0.25.into();
    c["sampling"]["n_samples"] = 100.into();
    c["analysis_window"]["start_ms"] = 20.0.into();
    c["analysis_window"]["end_ms"] = 80.0.into();
    let path = dir.join(format!("config-{sigma_baseline}.json"));
    fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
    path.file_name().unwrap().to_string_lossy().into_owned()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.5);
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "9", "--out", "a"]);
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "9", "--out", "b"]);
    for f in ["epochs.csv", "epochs.meta.json", "truth.json"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "10", "--out", "c"]);
    assert_ne!(fs::read(d.path().join("a/epochs.csv")).unwrap(), fs::read(d.path().join("c/epochs.csv")).unwrap());
}

#[test]
fn missing_seed_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = regbase(d.path(), &["simulate", "--preset", "s3-variance"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.path().join("out").exists());
}

#[test]
fn config_errors_exit_2_and_bad_formula_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.5);
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "1", "--out", "sim"]);
    let e = "sim/epochs.csv";
    for args in [
        &["fit", "--epochs", e, "--formula", "uv ~ nope", "--out", "x"][..],
        &["fit", "--epochs", e, "--strategy", "sideways", "--out", "x"][..],
        &["fit", "--epochs", e, "--window", "900,950", "--out", "x"][..],
        &["simulate", "--preset", "no-such-preset", "--seed", "1", "--out", "x"][..],
    ] {
        let out = regbase(d.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn none_and_regression_agree_without_baseline_variance() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.0);
    // zero baseline state plus zero per-sample noise leaves a constant baseline
    let mut c: Value = serde_json::from_str(&fs::read_to_string(d.path().join(&cfg)).unwrap()).unwrap();
    c["sample_noise_sd"] = 0.0.into();
    c["drift_rate_uv_per_s"] = 0.0.into();
    fs::write(d.path().join(&cfg), c.to_string()).unwrap();
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "4", "--out", "sim"]);
    let e = "sim/epochs.csv";
    ok(d.path(), &["fit", "--epochs", e, "--window", "20,80", "--strategy", "none", "--out", "none"]);
    let reg = regbase(d.path(), &["fit", "--epochs", e, "--window", "20,80", "--strategy", "regression", "--out", "reg"]);
    assert!(reg.status.success(), "{}", String::from_utf8_lossy(&reg.stderr));
    let get = |dir: &str| -> f64 {
        read_csv(&d.path().join(dir).join("coefficients.csv"))
            .into_iter()
            .find(|r| r[0] == "condition[S.match]")
            .map(|r| r[1].parse().unwrap())
            .unwrap()
    };
    assert!((get("none") - get("reg")).abs() <= 1e-6);
    assert!(String::from_utf8_lossy(&reg.stdout).contains("baseline covariate is constant"));
    let summary = fs::read_to_string(d.path().join("none/summary.txt")).unwrap();
    assert!(summary.contains("baseline terms dropped"));
}

#[test]
fn traditional_fit_notes_the_pinned_weight() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.5);
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "2", "--out", "sim"]);
    ok(d.path(), &["fit", "--epochs", "sim/epochs.csv", "--window", "20,80", "--strategy", "traditional", "--out", "t"]);
    let summary = fs::read_to_string(d.path().join("t/summary.txt")).unwrap();
    assert!(summary.contains("pinned to 1"));
    let terms: Vec<String> = read_csv(&d.path().join("t/coefficients.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(terms, ["(Intercept)", "condition[S.match]"]);
    let model: Value = serde_json::from_str(&fs::read_to_string(d.path().join("t/model.json")).unwrap()).unwrap();
    assert_eq!(model["kind"], "glm");
}

#[test]
fn compare_writes_lrt_json() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.5);
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "3", "--out", "sim"]);
    ok(
        d.path(),
        &[
            "compare",
            "--epochs",
            "sim/epochs.csv",
            "--window",
            "20,80",
            "--nested",
            "uv ~ baseline + condition",
            "--full",
            "uv ~ baseline * condition",
            "--out",
            "cmp",
        ],
    );
    let v: Value = serde_json::from_str(&fs::read_to_string(d.path().join("cmp/compare.json")).unwrap()).unwrap();
    assert_eq!(v["df"], 1);
    let chi2 = v["chi2"].as_f64().unwrap();
    let daic = v["delta_aic"].as_f64().unwrap();
    assert!(chi2 >= 0.0);
    assert!((daic - (chi2 - 2.0)).abs() < 1e-9);
    let p = v["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let out = regbase(
        d.path(),
        &["compare", "--epochs", "sim/epochs.csv", "--nested", "uv ~ baseline * condition", "--full", "uv ~ condition", "--out", "bad"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_reproduces_outputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.5);
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "5", "--out", "sim"]);
    ok(
        d.path(),
        &["bands", "--epochs", "sim/epochs.csv", "--n-boot", "200", "--seed", "8", "--difference", "match,mismatch", "--out", "b1"],
    );
    ok(d.path(), &["replay", "--run", "b1/run.json", "--out", "b2"]);
    for f in ["difference.csv", "difference.svg"] {
        assert_eq!(fs::read(d.path().join("b1").join(f)).unwrap(), fs::read(d.path().join("b2").join(f)).unwrap(), "{f}");
    }
    // replaying into the recorded directory rewrites every file unchanged
    let before = fs::read(d.path().join("b1/run.json")).unwrap();
    ok(d.path(), &["replay", "--run", "b1/run.json"]);
    assert_eq!(before, fs::read(d.path().join("b1/run.json")).unwrap());
    let svg = fs::read_to_string(d.path().join("b1/difference.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
}

#[test]
fn run_json_echoes_resolved_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.5);
    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "6", "--out", "sim"]);
    ok(d.path(), &["pointwise", "--epochs", "sim/epochs.csv", "--baseline", "-40,0", "--out", "pw"]);
    let v: Value = serde_json::from_str(&fs::read_to_string(d.path().join("pw/run.json")).unwrap()).unwrap();
    assert_eq!(v["command"]["subcommand"], "pointwise");
    assert_eq!(v["resolved"]["baseline_ms"], serde_json::json!([-40.0, 0.0]));
    assert_eq!(v["resolved"]["weight"], "Estimated");
    let rows = read_csv(&d.path().join("pw/pointwise.csv"));
    assert_eq!(rows.len(), 100 * 3);
}

#[test]
fn bayes_and_power_write_their_tables() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.5);
    ok(
        d.path(),
        &["power", "--config", &cfg, "--strategies", "traditional,regression", "--n-sim", "100", "--seed", "2", "--out", "pw"],
    );
    let rows = read_csv(&d.path().join("pw/power.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["traditional", "regression"]);
    assert!(rows.iter().all(|r| r[5] == "100"));

    ok(d.path(), &["simulate", "--config", &cfg, "--seed", "7", "--out", "sim"]);
    let out = regbase(
        d.path(),
        &["bayes", "--epochs", "sim/epochs.csv", "--window", "20,80", "--n-warmup", "500", "--n-iter", "1000", "--out", "by"],
    );
    assert!(matches!(out.status.code(), Some(0 | 1)));
    let post: Value = serde_json::from_str(&fs::read_to_string(d.path().join("by/posterior.json")).unwrap()).unwrap();
    assert_eq!(post["summary"].as_array().unwrap().len(), 5);
    let draws = read_csv(&d.path().join("by/draws.csv"));
    assert_eq!(draws.len(), 4 * 1000 * 5);
}
