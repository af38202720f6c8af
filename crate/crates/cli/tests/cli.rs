use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairexp"));
    cmd.env_remove("FAIREXP_OUT_DIR");
    cmd
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn solve_dgp1_oracle_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("dgp1_oracle_problem.json");
    let out = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sol = read_json(&tmp.path().join("solution.json"));
    let e: Vec<f64> = serde_json::from_value(sol["allocation"].clone()).unwrap();
    assert!((e[0] - 0.5).abs() < 1e-6 && (e[1] - 0.5).abs() < 1e-6);
    assert!((sol["objective"].as_f64().unwrap() - 22.19).abs() < 1e-9);
    assert_eq!(sol["active_constraints"].as_array().unwrap().len(), 2);
    assert!(tmp.path().join("manifest.json").exists());
}

#[test]
fn solve_single_group_gives_neyman_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "one.toml",
        "[problem]\nweights = [1.0]\nvar_treated = [6.25]\nvar_control = [2.25]\neffects = [0.0]\nc1 = 0.2\nc2 = 0.1\n",
    );
    let dir = tmp.path().join("out");
    let out = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let e = read_json(&dir.join("solution.json"))["allocation"][0]
        .as_f64()
        .unwrap();
    assert!((e - 0.625).abs() < 1e-8);
}

#[test]
fn malformed_config_exits_one_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", "{ \"weights\": [0.5, ");
    let dir = tmp.path().join("out");
    let out = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(!dir.exists());
}

#[test]
fn invalid_fields_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let body = std::fs::read_to_string(configs().join("trial_dgp1.toml"))
        .unwrap()
        .replace("c1 = 0.2", "c1 = 1.5")
        .replace("c2 = 0.1", "c2 = 0.5");
    let cfg = write(tmp.path(), "trial.toml", &body);
    let out = run(&["validate", "trial", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("c1") && err.contains("c2"), "{err}");
    let dir = tmp.path().join("out");
    let out = run(&[
        "trial",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(!dir.exists());
}

#[test]
fn non_convergence_exits_three_and_keeps_best_iterate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "capped.json",
        r#"{"problem": {"weights": [1.0], "var_treated": [6.25], "var_control": [2.25],
            "effects": [null], "c1": 0.2, "c2": 0.1},
            "solver": {"max_iter": 1}}"#,
    );
    let dir = tmp.path().join("out");
    let out = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    let sol = read_json(&dir.join("solution.json"));
    assert_eq!(sol["converged"], Value::Bool(false));
    assert!(sol["allocation"][0].as_f64().unwrap() > 0.5);
}

#[test]
fn single_stage_trial_matches_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let body = std::fs::read_to_string(configs().join("trial_dgp1.toml"))
        .unwrap()
        .replace("stages = 400", "stages = 1")
        .replace("initial_stage = 40", "initial_stage = 200");
    let cfg = write(tmp.path(), "t1.toml", &body);
    let dir = tmp.path().join("out");
    let out = run(&[
        "trial",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let log = std::fs::read_to_string(dir.join("stages.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 1);
    let stage: Value = serde_json::from_str(lines[0]).unwrap();
    let ps = stage["participants"].as_array().unwrap();
    assert_eq!(ps.len(), 200);
    let report = read_json(&dir.join("report.json"));
    let n = ps.len() as f64;
    let mut tau = 0.0;
    for g in 0..2u64 {
        let arm = |t: bool| -> Vec<f64> {
            ps.iter()
                .filter(|p| p["group"].as_u64() == Some(g) && p["treated"].as_bool() == Some(t))
                .map(|p| p["outcome"].as_f64().unwrap())
                .collect()
        };
        let (y1, y0) = (arm(true), arm(false));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let effect = mean(&y1) - mean(&y0);
        let got = report["report"]["groups"][g as usize]["estimate"]["effect"]
            .as_f64()
            .unwrap();
        assert!((got - effect).abs() < 1e-12);
        tau += (y1.len() + y0.len()) as f64 / n * effect;
    }
    let got = report["report"]["overall"]["effect"].as_f64().unwrap();
    assert!((got - tau).abs() < 1e-12);
}

#[test]
fn full_trial_reports_two_group_intervals_and_one_overall() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("trial_dgp1.toml");
    let out = run(&[
        "trial",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let r = read_json(&tmp.path().join("report.json"));
    assert_eq!(r["participants"], 439);
    let groups = r["report"]["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 2);
    for g in groups {
        let e = &g["estimate"];
        assert!(e["ci_lower"].as_f64().unwrap() < e["ci_upper"].as_f64().unwrap());
    }
    assert!(r["report"]["overall"]["ci_lower"].is_f64());
    let lines = std::fs::read_to_string(tmp.path().join("stages.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 400);
}

#[test]
fn seeds_are_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("trial_dgp1.toml");
    let go = |name: &str, seed: &str| {
        let dir = tmp.path().join(name);
        let out = run(&[
            "trial",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(code(&out), 0);
        std::fs::read(dir.join("stages.jsonl")).unwrap()
    };
    assert_eq!(go("a", "3"), go("b", "3"));
    assert_ne!(go("a", "3"), go("c", "4"));
}

#[test]
fn montecarlo_smoke_rows_and_env_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.json");
    let env_dir = tmp.path().join("from-env");
    let out = bin()
        .args(["montecarlo", "--config", cfg.to_str().unwrap()])
        .env("FAIREXP_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(env_dir.join("summary.csv")).unwrap();
    // Header plus three designs times two stage counts.
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let groups = std::fs::read_to_string(env_dir.join("groups.csv")).unwrap();
    assert_eq!(groups.lines().count(), 1 + 3 * 2 * 2);

    // The flag wins over the environment.
    let flag_dir = tmp.path().join("from-flag");
    let out = bin()
        .args([
            "montecarlo",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            flag_dir.to_str().unwrap(),
        ])
        .env("FAIREXP_OUT_DIR", tmp.path().join("unused"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(flag_dir.join("summary.csv").exists());
    assert!(!tmp.path().join("unused").exists());
}

#[test]
fn toml_and_json_configs_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let toml = configs().join("trial_dgp1.toml");
    let table: toml::Table = toml::from_str(&std::fs::read_to_string(&toml).unwrap()).unwrap();
    let json = write(
        tmp.path(),
        "trial.json",
        &serde_json::to_string(&table).unwrap(),
    );
    let go = |cfg: &Path, name: &str| {
        let dir = tmp.path().join(name);
        let out = run(&[
            "trial",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        (
            std::fs::read(dir.join("report.json")).unwrap(),
            read_json(&dir.join("manifest.json"))["config_digest"].clone(),
        )
    };
    assert_eq!(go(&toml, "t"), go(&json, "j"));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["solve"])), 1);
}
