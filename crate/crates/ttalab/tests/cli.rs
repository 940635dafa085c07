//! Black-box tests of the `ttalab` binary: exit codes, flag overrides, and
//! the compare subcommand.

use std::path::Path;
use std::process::Command;

fn ttalab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ttalab"))
}

/// Small-but-trainable config so CLI runs stay fast.
fn write_tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let out = dir.join("out");
    std::fs::write(
        &path,
        format!(
            r#"{{
  "source": {{"class_count": 3, "dim": 8, "n_per_class": 60}},
  "model": {{"pretrain_epochs": 40}},
  "stream": {{"batch_size": 16, "m_per_step": 32}},
  "out_dir": {:?},
  "seeds": [0]{extra}
}}"#,
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    path
}

#[test]
fn bad_usage_exits_2() {
    let out = ttalab().arg("run").arg("--method").arg("warp").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = ttalab().arg("--bogus-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), "");
    let out = ttalab()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--severity", "9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("severity"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"sream": {}}"#).unwrap();
    let out = ttalab().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), r#", "model": {"pretrain": false, "checkpoint": "/nonexistent/m.json"}"#);
    // note: duplicate "model" key — serde_json keeps the last; both ways this
    // must fail closed, either as a parse error or a missing checkpoint.
    let out = ttalab().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_then_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), "");
    let out_dir = dir.path().join("out");

    for method in ["noadapt", "tent"] {
        let out = ttalab()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--method", method, "--seeds", "0,1"])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "run {method} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let reports: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension().is_some_and(|x| x == "json")).then_some(p)
        })
        .collect();
    assert_eq!(reports.len(), 4, "expected 2 methods x 2 seeds reports");

    let summary_path = dir.path().join("summary.json");
    let out = ttalab()
        .arg("compare")
        .args(&reports)
        .arg("--out")
        .arg(&summary_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("noadapt") && stdout.contains("tent"));
    assert!(stdout.contains("mean_acc"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).unwrap();
    assert!(summary["methods"]["tent"]["mean_accuracy"].is_number());
}

#[test]
fn compare_rejects_mismatched_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), "");
    let out = ttalab()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--severity", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // second run on a different stream, into a fresh dir so both reports survive
    let out2 = dir.path().join("out2");
    let out = ttalab()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--severity", "4", "--out"])
        .arg(&out2)
        .output()
        .unwrap();
    assert!(out.status.success());

    let a = dir.path().join("out/sar_gn_seed0.json");
    let b = out2.join("sar_gn_seed0.json");
    let out = ttalab().arg("compare").arg(&a).arg(&b).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_var_sets_default_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(
        &cfg_path,
        r#"{
  "source": {"class_count": 3, "dim": 8, "n_per_class": 60},
  "model": {"pretrain_epochs": 40},
  "stream": {"batch_size": 16, "m_per_step": 32},
  "seeds": [0]
}"#,
    )
    .unwrap();
    let env_out = dir.path().join("from-env");
    let out = ttalab()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .env("TTALAB_OUT", &env_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_out.join("sar_gn_seed0.json").exists());
}
