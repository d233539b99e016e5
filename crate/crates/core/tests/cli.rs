use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn mrcouple(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrcouple"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

#[test]
fn run_writes_trajectory_summary_and_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let mut body: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config("conservation.json")).unwrap()).unwrap();
    body["experiment"] = serde_json::json!({"kind": "run"});
    let path = write_config(dir.path(), body);
    let out = mrcouple(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "window,t_sync,energy_1,energy_2,flux_conservation_residual,interfacial_energy_term"
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11);
    assert!(rows[0][4].is_nan() && rows[0][5].is_nan());
    for (k, r) in rows.iter().enumerate().skip(1) {
        assert_eq!(r[0], k as f64);
        assert!((r[1] - 0.1 * k as f64).abs() < 1e-12);
        assert!(r[4] < 1e-11);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["windows"], 10);
    assert_eq!(summary["scheme"], "crank-nicolson");
    for i in 1..=2 {
        let mesh = std::fs::read_to_string(dir.path().join(format!("mesh_{i}.txt"))).unwrap();
        assert!(mesh.starts_with(&format!("# mesh subdomain={i} nx=8 ny=8")));
        assert_eq!(mesh.lines().filter(|l| l.starts_with("elem ")).count(), 64);
    }
}

#[test]
fn check_suites_report_pass() {
    for (suite, file) in [("conservation", "conservation.json"), ("energy", "energy.json")] {
        let out = mrcouple(&[
            "check",
            "--suite",
            suite,
            "--config",
            config(file).to_str().unwrap(),
        ]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(out.status.success(), "{suite}: {stdout}");
        assert!(stdout.starts_with("PASS"));
    }
}

#[test]
fn conservation_check_fails_for_non_opposite_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(
        dir.path(),
        serde_json::json!({
            "geometry": {"nx": 4, "ny": [4, 4]},
            "problem": {"nu": [1.0, 1.0], "coupling": [[1.0, 0.0], [0.0, 1.0]], "initial": "bump"},
            "scheme": {"kind": "crank-nicolson"},
            "window": {"t_final": 0.5, "windows": 5, "substeps": [1, 2], "flux_orders": [1, 1]}
        }),
    );
    let out = mrcouple(&[
        "check",
        "--suite",
        "conservation",
        "--config",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn convergence_writes_rate_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = mrcouple(&[
        "convergence",
        "--config",
        config("convergence.json").to_str().unwrap(),
        "--levels",
        "3",
        "--jobs",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "level,dt,dt1,dt2,err_l2_u1,err_l2_u2,err_sync,rate_running"
    );
    assert_eq!(csv.lines().count(), 4);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rate: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("observed rate: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((1.7..2.3).contains(&rate), "rate {rate}");
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(
        dir.path(),
        serde_json::json!({
            "geometry": {"nx": 4, "ny": [4, 4]},
            "problem": {"nu": [1.0, -1.0], "coupling": [[1.0, 0.0], [0.0, 1.0]]},
            "scheme": {"kind": "crank-nicolson"},
            "window": {"t_final": 1.0, "windows": 4, "substeps": [0, 2], "flux_orders": [1, 1]}
        }),
    );
    let out = mrcouple(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nu") && stderr.contains("substeps"), "{stderr}");
}
