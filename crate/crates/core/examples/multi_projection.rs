//! Compare visiting orders over two parallel dispersive elements without
//! phase resets.

use prism::channel::{
    apply_dispersion, load_noise, photodetect, DispersionOperator, NoiseModel, FIBER_PS_PER_NM_PER_KM,
};
use prism::harness::single_pol_pilot_gain;
use prism::phase_retrieval::{run_multi_projection, PilotTargets, ProjectionSet, RetrievalConfig, Schedule};
use prism::waveform::{build_frame, shape_pulse, Constellation, FrameSpec, Modulation};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> prism::Result<()> {
    let spec = FrameSpec::default();
    let frame = build_frame(1, &spec, &Constellation::new(Modulation::Qpsk), 1)?;
    let link = DispersionOperator::fiber(60.0, FIBER_PS_PER_NM_PER_KM);
    let mut rx = vec![apply_dispersion(&shape_pulse(&frame.symbols[0], &spec)?, &link)];
    let noise = NoiseModel { target_osnr_db: Some(30.0), ..NoiseModel::default() };
    load_noise(&mut rx, &noise, &mut ChaCha20Rng::seed_from_u64(1))?;
    let rx = rx.remove(0);

    let delta = DispersionOperator::new(325.0);
    let a = photodetect(&rx);
    let traces = (1..=2)
        .map(|n| photodetect(&apply_dispersion(&rx, &DispersionOperator::new(n as f64 * 325.0))))
        .collect::<Vec<_>>();
    let cfg = RetrievalConfig {
        link_cd: link,
        retrieval_dispersion: delta,
        max_iterations: Some(2100),
        max_escapes: 0,
        stop_below: Some(0.0),
        seed: 1,
        ..RetrievalConfig::default()
    };
    for schedule in [Schedule::Scheme1, Schedule::Scheme2, Schedule::Combined] {
        let ps = ProjectionSet { delta, traces: traces.clone(), schedule };
        let pilots = PilotTargets::from_frame(&frame, 0, single_pol_pilot_gain(&a, spec.rolloff));
        let (_, r) = run_multi_projection(&a, &ps, &cfg, pilots, None)?;
        let at = |i: usize| r.mean_a_err_db[i.min(r.mean_a_err_db.len() - 1)];
        println!(
            "{schedule:?}: mean A_err {:.1} dB at 100, {:.1} dB at 1050, {:.1} dB at 1060, final {:.1} dB",
            at(99),
            at(1049),
            at(1059),
            10.0 * r.final_mean_a_err.log10()
        );
    }
    Ok(())
}
