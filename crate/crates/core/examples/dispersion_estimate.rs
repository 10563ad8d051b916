//! Estimate the fiber dispersion of a link by correlating the measured
//! intensity with intensities simulated from a known transmitted field.

use prism::channel::{apply_dispersion, photodetect, DispersionOperator, FIBER_PS_PER_NM_PER_KM};
use prism::phase_retrieval::{estimate_b2, B2Search};
use prism::waveform::{build_frame, shape_pulse, Constellation, FrameSpec, Modulation};

fn main() -> prism::Result<()> {
    let spec = FrameSpec::default();
    let frame = build_frame(3, &spec, &Constellation::new(Modulation::Qpsk), 1)?;
    let tx = shape_pulse(&frame.symbols[0], &spec)?;
    for km in [25.0, 60.0, 120.0] {
        let link = DispersionOperator::fiber(km, FIBER_PS_PER_NM_PER_KM);
        let a = photodetect(&apply_dispersion(&tx, &link));
        let coarse = estimate_b2(&a, &tx, &B2Search { start: 0.0, stop: 3000.0, step: 20.0 })?;
        let fine = estimate_b2(&a, &tx, &B2Search::around(coarse.dispersion.total_ps_per_nm, 40.0, 1.0))?;
        println!(
            "{km:>5} km: true {:>7.1} ps/nm, estimated {:>7.1} ps/nm (correlation {:.4})",
            link.total_ps_per_nm, fine.dispersion.total_ps_per_nm, fine.peak_correlation
        );
    }
    Ok(())
}
