use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pow-rmab");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("POW_RMAB_OUT")
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
[scenario]
kind = "throughput_activation"
theta0 = [0.3, 0.9]
theta1 = [0.02, 0.02]
delta = [0.35, 0.05]

[experiment]
policies = ["pow", "whittle", "fawt", "dpp", "random"]
k_values = [1, 3]
runs = 3
horizon = 400
seed = 9
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn headers(path: &Path) -> Vec<String> {
    csv::Reader::from_path(path)
        .unwrap()
        .headers()
        .unwrap()
        .iter()
        .map(String::from)
        .collect()
}

#[test]
fn index_on_tp4_reports_every_arm_indexable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("tp4.toml");
    let out = run(&["index", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["index_pow.csv", "index_whittle.csv"] {
        let path = tmp.path().join(name);
        assert_eq!(headers(&path)[0], "config_hash");
        let rows = rows(&path);
        assert_eq!(rows.len(), 4 * 50);
        assert!(rows.iter().all(|r| &r[4] == "true"), "{name} has a non-indexable arm");
    }
}

#[test]
fn empty_policy_list_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("empty_policies.toml");
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("experiment.policies"), "{err}");
}

#[test]
fn bad_inputs_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&["fluid", "--config", "does/not/exist.toml"], tmp.path());
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("cannot read config"));

    let cfg = write_config(tmp.path(), &format!("{SMALL}\nunexpected = 1\n"));
    let unknown = run(&["fluid", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unexpected"));

    let cfg = configs().join("tp4.toml");
    let guard = run(&["oracle", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!guard.status.success());
    assert!(String::from_utf8_lossy(&guard.stderr).contains("limit"));

    let usage = run(&["no-such-command"], tmp.path());
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn reruns_produce_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(&["sweep-k", "--config", cfg.to_str().unwrap()], dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["runs.csv", "aggregate.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
    assert_eq!(rows(&a.join("runs.csv")).len(), 2 * 5 * 3);
    let agg = headers(&a.join("aggregate.csv"));
    assert!(agg.iter().any(|h| h == "fluid_per_unit"));
    assert!(agg.iter().any(|h| h == "reward_per_unit_mean"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = tmp.path().join("from_env");
    let out = Command::new(BIN)
        .args(["fluid", "--with-dual", "--config", cfg.to_str().unwrap()])
        .env("POW_RMAB_OUT", &dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fluid = rows(&dir.join("fluid.csv"));
    assert_eq!(fluid.len(), 2);
    let dual = rows(&dir.join("sys_dual.csv"));
    let gap: f64 = dual[0][4].parse().unwrap();
    assert!(gap.abs() < 1e-6);
}

#[test]
fn simulate_uses_the_requested_k_and_kkt_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--k", "2"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = rows(&tmp.path().join("runs.csv"));
    assert_eq!(runs.len(), 5 * 3);
    let kkt = run(
        &["kkt", "--config", cfg.to_str().unwrap(), "--steps", "2000"],
        tmp.path(),
    );
    assert!(kkt.status.success(), "{}", String::from_utf8_lossy(&kkt.stderr));
    assert!(!rows(&tmp.path().join("kkt.csv")).is_empty());
}
