use std::path::Path;
use std::process::{Command, Output};

fn prism(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_an_io_error() {
    let out = prism(&["simulate", "--config", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", r#"{"id": "x", "osnr": 12}"#);
    let out = prism(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", r#"{"id": "x", "pilot_overhead": 1.5}"#);
    assert_eq!(prism(&["simulate", "--config", &cfg]).status.code(), Some(2));
    let out = prism(&["theory", "--modulation", "bpsk9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn theory_prints_a_falling_curve() {
    let out = prism(&["theory", "--osnr-min", "4", "--osnr-max", "12", "--step", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let bers: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(bers.len(), 5);
    assert!(bers.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{
            "id": "tiny",
            "n_symbols": 256,
            "osnr_db": 25,
            "retrieval": { "max_escapes": 2 },
            "sweep": { "variable": "osnr_db", "values": [20, 25] },
            "seeds": [1, 2]
        }"#,
    );
    let out_dir = dir.path().join("out");
    let out = prism(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--trace-convergence"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("tiny.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario_id,seed,sweep_value,ber,mean_a_err_db,iterations,converged,wall_time_s"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let order: Vec<(&str, &str)> = rows.iter().map(|r| (r[2], r[1])).collect();
    assert_eq!(order, [("20", "1"), ("20", "2"), ("25", "1"), ("25", "2")]);

    let json = out_dir.join("tiny.json");
    let report_dir = dir.path().join("summary");
    let out = prism(&["report", "--results", json.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report_dir.join("tiny_summary.json").exists());
    assert!(report_dir.join("tiny_summary.csv").exists());
}

#[test]
fn report_on_missing_results_is_an_io_error() {
    let out = prism(&["report", "--results", "/nonexistent/r.json"]);
    assert_eq!(out.status.code(), Some(3));
}
