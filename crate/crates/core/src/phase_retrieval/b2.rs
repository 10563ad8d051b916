use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::DispersionOperator;
use crate::error::{ensure_same_len, Error, Result};
use crate::fft::FftPair;
use crate::waveform::{ComplexWaveform, IntensityTrace};

/// Grid of candidate dispersions (ps/nm), inclusive of both ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct B2Search {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for B2Search {
    fn default() -> Self {
        Self { start: -2000.0, stop: 12000.0, step: 10.0 }
    }
}

impl B2Search {
    pub fn around(center: f64, half_width: f64, step: f64) -> Self {
        Self { start: center - half_width, stop: center + half_width, step }
    }

    fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step).floor() as usize + 1;
        (0..n).map(|k| self.start + k as f64 * self.step).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct B2Estimate {
    pub dispersion: DispersionOperator,
    pub peak_correlation: f64,
    /// Correlation barely varies over the grid, or peaks on its edge.
    pub low_confidence: bool,
    /// `(ps/nm, correlation)` for every grid point.
    pub curve: Vec<(f64, f64)>,
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Find the fiber dispersion whose simulated intensity `|h_CD * x|^2` best
/// correlates with the measured `a`, with parabolic refinement of the peak.
pub fn estimate_b2(a: &IntensityTrace, x: &ComplexWaveform, search: &B2Search) -> Result<B2Estimate> {
    ensure_same_len(x.len(), a.len())?;
    if !(search.step > 0.0) || search.stop < search.start {
        return Err(Error::InvalidInput("empty dispersion search grid".into()));
    }
    let n = x.len();
    let mut fft = FftPair::new(n);
    let mut spectrum = x.samples.clone();
    fft.forward(&mut spectrum);
    let grid = search.points();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut intensity = vec![0.0; n];
    let mut curve = Vec::with_capacity(grid.len());
    for &d in &grid {
        let op = DispersionOperator::new(d).with_wavelength(x.center_wavelength);
        for ((o, s), h) in buf.iter_mut().zip(&spectrum).zip(op.transfer(n, x.sample_rate)) {
            *o = s * h;
        }
        fft.inverse(&mut buf);
        for (v, z) in intensity.iter_mut().zip(&buf) {
            *v = z.norm_sqr();
        }
        curve.push((d, pearson(&a.samples, &intensity)));
    }
    let (best, &(d_best, c_best)) =
        curve.iter().enumerate().max_by(|p, q| p.1 .1.total_cmp(&q.1 .1)).expect("grid is nonempty");
    let c_min = curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut refined = d_best;
    if best > 0 && best + 1 < curve.len() {
        let (l, c, r) = (curve[best - 1].1, c_best, curve[best + 1].1);
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            let offset = 0.5 * (l - r) / denom;
            refined = d_best + offset.clamp(-0.5, 0.5) * search.step;
        }
    }
    let flat = (c_best - c_min).abs() < 1e-6 * c_best.abs().max(1e-12);
    let edge = curve.len() > 1 && (best == 0 || best + 1 == curve.len());
    Ok(B2Estimate {
        dispersion: DispersionOperator::new(refined).with_wavelength(x.center_wavelength),
        peak_correlation: c_best,
        low_confidence: flat || edge,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_dispersion, photodetect};
    use crate::waveform::{build_frame, shape_pulse, Constellation, FrameSpec, Modulation};

    fn tx(seed: u64) -> ComplexWaveform {
        let spec = FrameSpec { n_payload_symbols: 1024, ..FrameSpec::default() };
        let f = build_frame(seed, &spec, &Constellation::new(Modulation::Qpsk), 1).unwrap();
        shape_pulse(&f.symbols[0], &spec).unwrap()
    }

    #[test]
    fn recovers_60_km_dispersion() {
        let x = tx(1);
        let a = photodetect(&apply_dispersion(&x, &DispersionOperator::new(1029.0)));
        let est = estimate_b2(&a, &x, &B2Search::around(1000.0, 600.0, 10.0)).unwrap();
        assert!((est.dispersion.total_ps_per_nm - 1029.0).abs() <= 10.0, "{:?}", est.dispersion);
        assert!(!est.low_confidence);
        assert!(est.peak_correlation > 0.999);
    }

    #[test]
    fn zero_dispersion_channel() {
        let x = tx(2);
        let a = photodetect(&x);
        let est = estimate_b2(&a, &x, &B2Search::around(0.0, 500.0, 10.0)).unwrap();
        assert!(est.dispersion.total_ps_per_nm.abs() <= 10.0);
    }

    #[test]
    fn constant_envelope_is_low_confidence() {
        let n = 512;
        let cw = ComplexWaveform::new(vec![Complex64::new(1.0, 0.0); n], 60e9, 1550e-9).unwrap();
        let a = photodetect(&cw);
        let est = estimate_b2(&a, &cw, &B2Search::around(0.0, 100.0, 10.0)).unwrap();
        assert!(est.low_confidence);
    }
}
