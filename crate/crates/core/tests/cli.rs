use std::fs;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lsa-icl"));
    c.env_remove("LSA_ICL_OUT");
    c
}

#[test]
fn converge_writes_manifest_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bin().args(["converge", "--out"]).arg(&out).output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    for f in ["results.csv", "summary.json", "config_echo.json", "trajectory.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["fail_count"], 0);
    assert_eq!(summary["suite"], "converge");
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config_echo.json")).unwrap()).unwrap();
    assert_eq!(echo["d"], 5);
    assert!(echo["integrator"]["rel_tol"].is_number());
}

#[test]
fn env_var_sets_output_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let from_env = dir.path().join("env");
    let from_flag = dir.path().join("flag");
    let args = ["oracle", "--kind", "fourth-moment", "--samples", "1e4", "--pairs", "2"];
    let status = bin().args(args).env("LSA_ICL_OUT", &from_env).output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    assert!(from_env.join("results.csv").exists());
    let status = bin()
        .args(args)
        .arg("--out")
        .arg(&from_flag)
        .env("LSA_ICL_OUT", dir.path().join("unused"))
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    assert!(from_flag.join("results.csv").exists());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn same_seed_same_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = bin()
            .args(["--seed", "4", "oracle", "--kind", "gamma-moment", "--samples", "5000", "--pairs", "2", "--out"])
            .arg(&out)
            .output()
            .unwrap()
            .status;
        assert_eq!(status.code(), Some(0));
        (
            fs::read_to_string(out.join("results.csv")).unwrap(),
            {
                let mut echo: serde_json::Value =
                    serde_json::from_str(&fs::read_to_string(out.join("config_echo.json")).unwrap()).unwrap();
                echo.as_object_mut().unwrap().remove("output");
                echo
            },
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn bad_config_exits_two_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"d": 3, "sigma": -0.5}"#).unwrap();
    let out = bin().args(["converge", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma"));

    fs::write(&cfg, r#"{"d": 3, "covariance": {"kind": "diagonal", "values": [1, 2]}}"#).unwrap();
    let out = bin().args(["converge", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("covariance"));
}

#[test]
fn missing_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["converge", "--config"])
        .arg(dir.path().join("absent.json"))
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn noncompliant_init_is_refused_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("big.json");
    fs::write(&cfg, r#"{"d": 2, "covariance": {"kind": "identity"}, "sigma": 5.0}"#).unwrap();
    let out = bin().args(["converge", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let status = bin()
        .args(["converge", "--allow-noncompliant-init", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o2"))
        .output()
        .unwrap()
        .status;
    assert!(matches!(status.code(), Some(0) | Some(1)));
    assert!(dir.path().join("o2").join("trajectory.csv").exists());
}

#[test]
fn unwritable_output_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("not-a-dir");
    fs::write(&file, "x").unwrap();
    let status = bin().args(["converge", "--out"]).arg(file.join("sub")).output().unwrap().status;
    assert_eq!(status.code(), Some(3));
}

#[test]
fn configs_in_repo_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        lsa_icl::experiments::ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}
