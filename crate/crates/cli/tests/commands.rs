use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitrate"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn run_config(cfg: &str, args: &[&str], out: &Path) -> Output {
    let cfg = config(cfg);
    let mut all = vec!["--config", cfg.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all, out)
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<_> = lines.next().unwrap().split(',').collect();
    let j = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(j).unwrap().parse().unwrap())
        .collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_survival_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("ou1d.json", &["simulate", "--paths", "1000"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("survival.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "T,p_hat,half_width,minus_log_p_over_T");
    assert_eq!(csv.lines().count(), 5);
    let p = column(&csv, "p_hat");
    assert!(p.windows(2).all(|w| w[1] <= w[0]));
    let m = manifest(dir.path());
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["parameters"]["paths"], 1000);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn too_few_paths_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("ou1d.json", &["simulate", "--paths", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("paths must be >= 100"));
}

#[test]
fn malformed_config_names_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        "{\n  \"A\": [[1.0]],\n  \"sigma\": [[1.0]],\n  \"epsilon\": \"high\",\n  \"domain\": {\"kind\": \"box\", \"lower\": [0.0], \"upper\": [1.0]}\n}\n",
    )
    .unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "eigen"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4") && err.contains("epsilon"), "{err}");
}

#[test]
fn same_seed_gives_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run_config("ou1d.json", &["--seed", "7", "simulate", "--paths", "500"], d.path());
        assert!(o.status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("survival.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn eigen_matches_laplacian() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("brownian1d.json", &["eigen"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("eigenvalue.csv")).unwrap();
    let lambda = column(&csv, "lambda")[0];
    let exact = 0.1 * std::f64::consts::PI.powi(2) / 2.0;
    assert!((lambda - exact).abs() < 1e-4, "{lambda}");
}

#[test]
fn unstable_kernel_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("unstable1d.json", &["kernel"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("kernel.csv")).unwrap();
    let member = column(&csv, "member");
    assert_eq!(member.len(), 201);
    assert!(member.iter().all(|&m| m == 0.0));
}

#[test]
fn scalar_game_reaches_lower_corner() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("scalar_game.json", &["nash"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("gains.csv")).unwrap();
    for k in column(&csv, "gain") {
        assert!((k + 0.25).abs() <= 5e-5, "{k}");
    }
    let fin: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("final_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(fin["gains"][0][0][0], -0.25);
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "nightly"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["kernel"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn every_shipped_config_validates() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        exitrate::config::ProblemConfig::from_json(&text)
            .and_then(|c| c.validate())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 6);
}
