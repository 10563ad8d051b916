use std::process::Command;

use prism::harness::{run_scenario, CalibrationSpec, LinkSpec, RunOptions, Scenario, Sweep, SweepVariable};
use prism::waveform::read_waveforms;

fn small(id: &str) -> Scenario {
    Scenario {
        id: id.into(),
        n_symbols: 512,
        link: LinkSpec { length_km: 60.0, ..LinkSpec::default() },
        sweep: Sweep { variable: SweepVariable::PilotOverhead, values: vec![0.2] },
        ..Scenario::default()
    }
}

#[test]
fn noiseless_single_pol_recovers_every_bit() {
    let mut s = small("noiseless");
    s.calibration = Some(CalibrationSpec::default());
    s.seeds = vec![1, 2];
    let rows = run_scenario(&s, &RunOptions::default()).unwrap().rows;
    for r in &rows {
        assert!(r.error.is_none(), "{:?}", r.error);
        assert_eq!(r.bit_errors, 0, "seed {}", r.seed);
        assert!(r.mean_a_err_db < -60.0, "seed {}: {} dB", r.seed, r.mean_a_err_db);
    }
}

#[test]
fn runs_are_reproducible() {
    let mut s = small("repro");
    s.osnr_db = Some(18.0);
    s.retrieval.max_escapes = 4;
    let a = run_scenario(&s, &RunOptions::default()).unwrap().rows;
    let b = run_scenario(&s, &RunOptions { threads: Some(1), ..RunOptions::default() }).unwrap().rows;
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.ber.to_bits(), y.ber.to_bits());
        assert_eq!(x.mean_a_err_db.to_bits(), y.mean_a_err_db.to_bits());
        assert_eq!(x.iterations, y.iterations);
    }
}

#[test]
fn saved_captures_replay_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let s = small("replay");
    let cfg = dir.path().join("s.json");
    std::fs::write(&cfg, serde_json::to_string(&s).unwrap()).unwrap();
    let opts =
        RunOptions { artifact_dir: Some(dir.path().to_path_buf()), save_captures: true, ..RunOptions::default() };
    let rows = run_scenario(&s, &opts).unwrap().rows;
    assert_eq!(rows[0].bit_errors, 0);

    let stem = dir.path().join("replay_v0_s1");
    let p = |suffix: &str| format!("{}{suffix}", stem.display());
    let out = dir.path().join("field");
    let status = Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(["retrieve", "--a", &p("_a.bin"), "--b", &p("_b.bin"), "--meta", &p("_meta.json")])
        .args(["--scenario", cfg.to_str().unwrap(), "--seed", "1", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let field = read_waveforms(&out.join("field.json"), &out.join("field.bin")).unwrap();
    assert_eq!(field.len(), 1);
    assert_eq!(field[0].len(), 512 * s.samples_per_symbol);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert!(report["final_mean_a_err"].as_f64().unwrap() < 1e-6);
}
