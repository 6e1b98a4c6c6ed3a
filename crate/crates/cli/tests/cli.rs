use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn linrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linrl")).args(args).output().expect("binary runs")
}

fn config_path(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).to_string_lossy().into_owned()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(rd) => rd.map(|e| e.unwrap().path()).collect(),
        Err(_) => vec![],
    };
    v.sort();
    v
}

fn only_csv(dir: &Path) -> PathBuf {
    files(dir).into_iter().find(|p| p.extension().is_some_and(|e| e == "csv")).expect("csv written")
}

const SMALL: [&str; 6] = ["--set", "horizon=5", "--set", "episodes=12", "--set", "critic_steps=20"];

#[test]
fn run_writes_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config_path("random_mdp.json");
    let mut args = vec!["run", "--config", &cfg, "--seed", "0", "--out", out];
    args.extend(SMALL);
    let o = linrl(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(only_csv(dir.path())).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "episode,exact_value,mixture_value,cum_regret,optimism_violation_rate,proj_err_max,wall_ms"
    );
    assert_eq!(lines.count(), 12);
}

#[test]
fn invalid_key_fails_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config_path("random_mdp.json");
    let o = linrl(&["run", "--config", &cfg, "--set", "no_such_key=1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    assert!(files(&out).is_empty());

    let o = linrl(&["run", "--set", "eta=-1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(files(&out).is_empty());
}

#[test]
fn same_seed_gives_identical_csv() {
    let cfg = config_path("random_mdp.json");
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["run", "--config", &cfg, "--seed", "3", "--out", dir.path().to_str().unwrap()];
        args.extend(SMALL);
        let o = Command::new(env!("CARGO_BIN_EXE_linrl")).args(&args).env("LINRL_DETERMINISTIC", "1").output().unwrap();
        assert!(o.status.success());
        bytes.push(std::fs::read(only_csv(dir.path())).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn numerical_abort_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = linrl(&[
        "run",
        "--set",
        "horizon=4",
        "--set",
        "episodes=3",
        "--set",
        "critic_lr=50",
        "--set",
        "critic_steps=500",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn validate_posterior_pass_and_fail() {
    let o = linrl(&["validate-posterior"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(text.contains("PASS"));

    let o = linrl(&["validate-posterior", "--set", "zeta_inv=0"]);
    assert!(o.status.success());

    let o = linrl(&["validate-posterior", "--set", "chain_lr_scale=1.5"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn plot_data_merges_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["run", "--seeds", "0..3", "--out", out];
    args.extend(SMALL);
    assert!(linrl(&args).status.success());
    let table = dir.path().join("curves.csv");
    let o = linrl(&["plot-data", "--input", out, "--out", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().next().unwrap(), "algorithm,metric,episode,mean,ci95,n");
    // three metrics for each of 12 episodes, one algorithm
    assert_eq!(text.lines().count(), 1 + 3 * 12);

    let empty = tempfile::tempdir().unwrap();
    let o = linrl(&["plot-data", "--input", empty.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn single_seed_has_empty_ci() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["run", "--out", out];
    args.extend(SMALL);
    assert!(linrl(&args).status.success());
    let o = linrl(&["plot-data", "--input", out]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[4], "", "{line}");
    }
}

#[test]
fn sweep_and_design() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"eta": [0.1, 10.0]}"#).unwrap();
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep", "--grid", grid.to_str().unwrap(), "--seeds", "0,1", "--jobs", "2"];
    args.extend(["--out", out.to_str().unwrap()]);
    args.extend(SMALL);
    let o = linrl(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 2);
    assert!(report["best"]["config_hash"].is_string());
    // 2 configs x 2 seeds x (csv + json) + sweep.json
    assert_eq!(files(&out).len(), 9);

    let o = linrl(&["design", "--set", "design_epsilon=0.9"]);
    assert!(o.status.success());
    let coreset: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!coreset["points"].as_array().unwrap().is_empty());
}
