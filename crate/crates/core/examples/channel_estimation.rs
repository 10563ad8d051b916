//! Estimate a 2x2 polarization channel from a training capture and watch
//! the PDL of the estimate across passes of the joint loop.

use prism::channel::{
    apply_dispersion, apply_polarization_channel, load_noise, random_unitary, DispersionOperator, NoiseModel,
    PolarizationChannel, FIBER_PS_PER_NM_PER_KM,
};
use prism::phase_retrieval::RetrievalConfig;
use prism::pol_rx::{joint_estimation_loop, JointLoopConfig, QuadIntensityCapture};
use prism::waveform::{build_frame, shape_pulse, Constellation, FrameSpec, Modulation};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> prism::Result<()> {
    let seed = 5;
    let spec = FrameSpec { n_training_symbols: 1024, n_payload_symbols: 0, ..FrameSpec::default() };
    let frame = build_frame(seed, &spec, &Constellation::new(Modulation::Qpsk), 2)?;
    let tx: Vec<_> = frame.symbols.iter().map(|s| shape_pulse(s, &spec)).collect::<Result<_, _>>()?;
    let mixing = PolarizationChannel::flat(random_unitary(&mut ChaCha20Rng::seed_from_u64(seed)));
    let (x, y) = apply_polarization_channel(&tx[0], &tx[1], &mixing)?;
    let link = DispersionOperator::fiber(520.0, FIBER_PS_PER_NM_PER_KM);
    let mut rx = vec![apply_dispersion(&x, &link), apply_dispersion(&y, &link)];
    let noise = NoiseModel { target_osnr_db: Some(28.0), ..NoiseModel::default() };
    load_noise(&mut rx, &noise, &mut ChaCha20Rng::seed_from_u64(seed + 1))?;

    let d = DispersionOperator::new(650.0);
    let cap = QuadIntensityCapture::detect([&rx[0], &rx[1]], [d, d])?;
    let cfg = RetrievalConfig { link_cd: link, max_iterations: Some(5000), seed, ..RetrievalConfig::default() };
    let est = joint_estimation_loop(&cap, &frame, &cfg, &JointLoopConfig { seed, ..JointLoopConfig::default() })?;
    for e in &est.history {
        println!("pass {}: PDL {:.3} dB", e.iteration, e.pdl_db);
    }
    Ok(())
}
