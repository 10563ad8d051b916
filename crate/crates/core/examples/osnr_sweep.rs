//! OSNR sweep of the single-polarization receiver, written as CSV and JSON
//! reports, with the OSNR penalty against theory at BER 2e-2.
//!
//! Usage: `osnr_sweep [output_dir]`.

use prism::harness::{emit_report, run_scenario, summarize, RunOptions, Scenario};

const SCENARIO: &str = r#"{
    "id": "osnr_sweep",
    "pilot_overhead": 0.2,
    "link": { "length_km": 60 },
    "sweep": { "variable": "osnr_db", "values": [12, 14, 16, 18, 20] },
    "seeds": [1, 2]
}"#;

fn main() -> prism::Result<()> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("prism-sweep"));
    let s = Scenario::from_json(SCENARIO)?;
    let result = run_scenario(&s, &RunOptions::default())?;
    let (csv, json) = emit_report(&result, &dir)?;
    let sum = summarize(&result, 2e-2)?;
    for p in &sum.points {
        println!("{:>5.1} dB  BER {:.2e}", p.sweep_value, p.ber);
    }
    if let (Some(r), Some(t)) = (sum.required_osnr_db, sum.theory_osnr_db) {
        println!("BER 2e-2 at {r:.1} dB, theory {t:.1} dB, penalty {:.1} dB", r - t);
    }
    println!("reports: {}, {}", csv.display(), json.display());
    Ok(())
}
