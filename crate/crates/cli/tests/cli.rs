use std::path::Path;
use std::process::{Command, Output};

fn emapg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emapg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "steps = 3\nlearning_rate = 0.1\n").unwrap();
    let out = emapg(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = emapg(&["dynamics", "--horizn", "10"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizn"));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "steps = 3\nlr = = 2\n").unwrap();
    let out = emapg(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    std::fs::write(&cfg, "[section]\nsteps = 3\n").unwrap();
    let out = emapg(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn audit_estimators_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = emapg(&["audit-estimators"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let claims = read(&dir.path().join("claims.csv"));
    let mut lines = claims.lines();
    assert_eq!(lines.next(), Some("estimator,value_target,value_err,value_bias,grad_target,grad_err,pass"));
    let rows: Vec<_> = lines.collect();
    assert!(rows.len() >= 6);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
    let manifest = read(&dir.path().join("manifest.toml"));
    assert!(manifest.contains("seed = 0"));
    assert!(manifest.contains("ChaCha8"));
}

#[test]
fn failing_audit_exits_1_and_lists_rows() {
    let dir = tempfile::tempdir().unwrap();
    // A negative slack makes every variance ordering fail.
    let out = emapg(&["audit-estimators", "--variance_slack", "-2.0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL variance/"));
}

#[test]
fn dynamics_probes_match_the_regime_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let out = emapg(&["dynamics", "--steady_instances", "50"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let regimes = read(&dir.path().join("regimes.csv"));
    for (x, regime) in [("5e-1", "stable_monotone"), ("1.2e0", "stable_oscillatory"), ("1.9e0", "unstable")] {
        let row = format!("0.9,{x},{regime},{regime},true");
        assert!(regimes.lines().any(|l| l == row), "missing {row}");
    }
}

#[test]
fn overrides_beat_the_config_file_and_runs_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "steps = 50\ngroup_size = 8\nestimator = \"k3\"\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = emapg(&["train", "--config", cfg.to_str().unwrap(), "--steps", "4", "--seed", "9"], out);
        assert_eq!(o.status.code(), Some(0));
    }
    let metrics = read(&a.join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 5);
    assert_eq!(metrics, read(&b.join("metrics.csv")));
    assert_eq!(read(&a.join("manifest.toml")), read(&b.join("manifest.toml")));
    assert!(read(&a.join("manifest.toml")).contains("estimator = \"k3\""));
}

#[test]
fn execution_mode_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["bench", "--vocab", "200", "--trials", "8", "--b_list", "[16, 64]", "--k_list", "[4]"];
    let p = dir.path().join("p");
    let s = dir.path().join("s");
    emapg(&args, &p);
    let mut seq = args.to_vec();
    seq.extend(["--execution", "sequential"]);
    emapg(&seq, &s);
    assert_eq!(read(&p.join("rel_rmse.csv")), read(&s.join("rel_rmse.csv")));
}
