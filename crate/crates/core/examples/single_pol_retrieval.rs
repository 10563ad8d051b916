//! Recover a dispersed QPSK field from two intensity captures and count
//! bit errors.
//!
//! Usage: `single_pol_retrieval [osnr_db] [seed]`. Without an OSNR the
//! capture is noiseless.

use prism::channel::{
    apply_dispersion, load_noise, photodetect, DispersionOperator, NoiseModel, FIBER_PS_PER_NM_PER_KM,
};
use prism::dsp_backend::{count_ber, recover_single_pol};
use prism::harness::single_pol_pilot_gain;
use prism::phase_retrieval::{run_retrieval, PilotTargets, RetrievalConfig};
use prism::waveform::{build_frame, shape_pulse, Constellation, FrameSpec, Modulation};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> prism::Result<()> {
    let mut args = std::env::args().skip(1);
    let osnr_db: Option<f64> = args.next().and_then(|s| s.parse().ok());
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let spec = FrameSpec::default();
    let frame = build_frame(seed, &spec, &Constellation::new(Modulation::Qpsk), 1)?;
    let link = DispersionOperator::fiber(60.0, FIBER_PS_PER_NM_PER_KM);
    let mut rx = vec![apply_dispersion(&shape_pulse(&frame.symbols[0], &spec)?, &link)];
    let noise = NoiseModel { target_osnr_db: osnr_db, ..NoiseModel::default() };
    load_noise(&mut rx, &noise, &mut ChaCha20Rng::seed_from_u64(seed))?;
    let rx = rx.remove(0);

    let mut cfg = RetrievalConfig { link_cd: link, seed, ..RetrievalConfig::default() };
    if osnr_db.is_none() {
        cfg.epsilon = 1e-4;
        cfg.stop_below = Some(1e-6);
    }
    let a = photodetect(&rx);
    let b = photodetect(&apply_dispersion(&rx, &cfg.retrieval_dispersion));
    let pilots = PilotTargets::from_frame(&frame, 0, single_pol_pilot_gain(&a, spec.rolloff));
    let (field, report) = run_retrieval(&a, &b, &cfg, pilots, Some(&rx))?;

    let payload = recover_single_pol(&field, &link, &frame, 0, 64)?;
    let ber = count_ber(&[payload], &frame)?;
    println!(
        "{} iterations, {} escapes, mean A_err {:.1} dB, {:.1}% of symbols within 0.1 rad",
        report.iterations_used,
        report.escapes_done,
        10.0 * report.final_mean_a_err.log10(),
        100.0 * report.fraction_within(0.1).unwrap_or(f64::NAN)
    );
    println!("BER {:.2e} ({} errors in {} bits)", ber.ber, ber.bit_errors, ber.bits_counted);
    Ok(())
}
