//! BER floor set by the digitizer resolution at high OSNR.

use prism::harness::{run_scenario, summarize, RunOptions, Scenario, Sweep, SweepVariable};

fn main() -> prism::Result<()> {
    let s = Scenario {
        id: "enob".into(),
        osnr_db: Some(27.0),
        sweep: Sweep { variable: SweepVariable::Enob, values: vec![5.3, 6.0, 7.0, 8.0] },
        seeds: vec![1, 2],
        ..Scenario::default()
    };
    let sum = summarize(&run_scenario(&s, &RunOptions::default())?, 2e-2)?;
    for p in &sum.points {
        println!("ENOB {:>4.1}: BER {:.2e} ({} errors)", p.sweep_value, p.ber, p.bit_errors);
    }
    Ok(())
}
