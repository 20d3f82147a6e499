use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reafuse"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn reafuse")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL_C2: &str = r#"{
    // small C2 setup
    "pyramid": {"kernel_channels": 2, "orientations": 2, "levels": 2, "reduction": 2},
    "input": {"size": 8},
    "trials": 3
}"#;

#[test]
fn trivial_group_verify_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = config("trivial_group.json");
    let out = run(&["verify", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["exit_code"], 0);
    let variants = report["equivariance"]["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 5);
    assert!(variants.iter().all(|v| v["expect_equivariant"] == true));
    assert!(report.get("timings").is_none());
}

#[test]
fn odd_spatial_size_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"pyramid": {"kernel_channels": 8, "orientations": 4, "levels": 3}, "input": {"size": 33}}"#,
    );
    let out = run(&["verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("spatial size 33 not divisible"), "{err}");
}

#[test]
fn bad_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    assert_eq!(code(&run(&["oracle", "--config", missing.to_str().unwrap()])), 2);
    for text in [
        "{ not json",
        r#"{"pyramid": {"kernel_channels": 8, "orientations": 3}}"#,
        r#"{"pyramid": {"kernel_channels": 8, "orientations": 4}, "surprise": true}"#,
        r#"{"pyramid": {"kernel_channels": 8, "orientations": 4, "variant": "fpn"}}"#,
    ] {
        let cfg = write_config(tmp.path(), text);
        let out = run(&["oracle", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 2, "{text}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn unwritable_demo_directory_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("out");
    let cfg = write_config(tmp.path(), SMALL_C2);
    let out = run(&["demo", "--config", cfg.to_str().unwrap(), "--out", target.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("file"));
}

#[test]
fn tight_equivariance_threshold_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &SMALL_C2.replace(r#""trials": 3"#, r#""trials": 3, "thresholds": {"equivariant": 1e-30}"#),
    );
    let out = run(&["verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn unreachable_breakage_is_inconclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let json = tmp.path().join("report.json");
    let cfg = write_config(
        tmp.path(),
        &SMALL_C2.replace(r#""trials": 3"#, r#""trials": 2, "max_reseeds": 1, "thresholds": {"broken": 1e3}"#),
    );
    let out = run(&["verify", "--config", cfg.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    let report: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let verdicts: Vec<&str> = report["equivariance"]["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["verdict"].as_str().unwrap())
        .collect();
    assert_eq!(verdicts, ["pass", "inconclusive", "pass", "inconclusive", "pass"]);
    let plus_se = &report["equivariance"]["variants"][1];
    assert!(plus_se["trials"].as_array().unwrap().iter().all(|t| t["reseeds"] == 1));
}

#[test]
fn oracle_and_gradcheck_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("c2.json");
    let json = tmp.path().join("oracle.json");
    let out = run(&["oracle", "--config", cfg.to_str().unwrap(), "--json", json.to_str().unwrap(), "--timings"]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["command"], "oracle");
    assert!(report["timings"]["oracle"].as_f64().unwrap() >= 0.0);
    assert!(report["oracle"]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["max_abs_deviation"].as_f64().unwrap() <= 1e-12));

    let cfg = config("gradcheck_small.json");
    let json = tmp.path().join("grad.json");
    let out = run(&["gradcheck", "--config", cfg.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["gradcheck"]["h"], 1e-5);
    assert_eq!(report["gradcheck"]["stencil"], "five_point");
}

#[test]
fn seed_flag_overrides_config_and_reports_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_C2);
    let mut reports = Vec::new();
    for (i, seed) in ["7", "7", "8"].iter().enumerate() {
        let json = tmp.path().join(format!("r{i}.json"));
        let out = run(&["verify", "--config", cfg.to_str().unwrap(), "--seed", seed, "--json", json.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
        reports.push(std::fs::read(&json).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_ne!(reports[0], reports[2]);
    let report: Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(report["seed"], 7);
}

#[test]
fn thread_cap_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_C2);
    let ok = bin()
        .args(["verify", "--config", cfg.to_str().unwrap()])
        .env("REAFUSE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&ok), 0);
    let bad = bin()
        .args(["verify", "--config", cfg.to_str().unwrap()])
        .env("REAFUSE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}
