//! Polarization-diversity receiver over a long dispersive link with random
//! polarization mixing and DGD.
//!
//! Usage: `dual_pol_receiver [pilot_overhead] [osnr_db]`. Takes about a
//! minute per run.

use prism::harness::{run_scenario, LinkSpec, Receiver, RunOptions, Scenario, Sweep, SweepVariable};

fn main() -> prism::Result<()> {
    let mut args = std::env::args().skip(1);
    let overhead: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let osnr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(28.0);
    let mut s = Scenario {
        id: "dual_pol".into(),
        receiver: Receiver::DualPol,
        n_training: 2048,
        n_symbols: 2048,
        link: LinkSpec { length_km: 520.0, ..LinkSpec::default() },
        sweep: Sweep { variable: SweepVariable::PilotOverhead, values: vec![overhead] },
        osnr_db: Some(osnr),
        seeds: vec![1],
        ..Scenario::default()
    };
    s.dual_pol.retrieval.max_iterations = Some(20_000);
    let r = run_scenario(&s, &RunOptions::default())?;
    for row in &r.rows {
        println!(
            "overhead {:.0}%: BER {:.2e} ({} / {} bits), channel PDL {:.2} dB, {:.0} s",
            100.0 * row.sweep_value,
            row.ber,
            row.bit_errors,
            row.bits_counted,
            row.pdl_db.unwrap_or(f64::NAN),
            row.wall_time_s
        );
    }
    Ok(())
}
