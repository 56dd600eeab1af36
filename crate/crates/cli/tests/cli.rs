use std::process::Command;

fn ncarq(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ncarq")).args(args).output().unwrap()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn eval_uncoded_reports_one_row_per_loss() {
    let o = ncarq(&["eval", "--policy", "uncoded", "--loss", "0.1,0.3", "--slots", "20000", "--seeds", "2"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("uncoded")).count(), 2);
}

#[test]
fn learn_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = ncarq(&[
        "learn", "--users", "4", "--loss", "0.2", "--phase-slots", "5000", "--max-phases", "2", "--slots", "5000",
        "--seeds", "1", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "policy_table.csv", "values.csv", "throughput.csv", "per_user.csv", "policy_0.csv", "checkpoint_0.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let policy = dir.path().join("policy_0.csv");
    let o = ncarq(&["eval", "--users", "4", "--policy", policy.to_str().unwrap(), "--slots", "5000", "--seeds", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("policy_0"));
}

#[test]
fn config_file_is_honoured_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{"channel": {"k": 3, "loss": 0.5, "gamma": 0.9, "seed": 4},
            "scheme": "notte", "policies": ["uncoded"], "eval": {"slots": 20000, "seeds": 2}}"#,
    )
    .unwrap();
    let o = ncarq(&["compare", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("0.5 "));
    let o = ncarq(&["compare", "--config", cfg.to_str().unwrap(), "--loss", "0.0"]);
    assert!(stdout(&o).contains("1.0000"));
}

#[test]
fn invalid_config_names_the_field() {
    let o = ncarq(&["eval", "--scheme", "agg2"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("tte"));
}

#[test]
fn diff_lists_disagreements() {
    let o = ncarq(&["diff", "sg", "sg"]);
    assert!(stdout(&o).contains("agree"));
    let o = ncarq(&["diff", "thr:2", "thr:4", "--scheme", "oned", "--users", "4"]);
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn oracle_passes_at_three_users() {
    let dir = tempfile::tempdir().unwrap();
    let o = ncarq(&["oracle", "--users", "3", "--loss", "0.25", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("FAIL"));
    assert!(dir.path().join("oracle.json").exists());
}

#[test]
fn oracle_refuses_large_systems_without_override() {
    let o = ncarq(&["oracle", "--users", "5"]);
    assert!(!o.status.success());
}
