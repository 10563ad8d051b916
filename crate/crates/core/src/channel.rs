//! Everything between transmit and receive DSP: chromatic dispersion,
//! polarization mixing with DGD, OSNR-calibrated noise loading,
//! photodetection and converter (ENOB) noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, Error, Result};
use crate::fft::{bin_frequencies, FftPair};
use crate::waveform::{mean_power, ComplexWaveform, IntensityTrace, DEFAULT_WAVELENGTH};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default noise reference bandwidth, 0.1 nm at 1550 nm (Hz).
pub const REFERENCE_BANDWIDTH: f64 = 12.5e9;

/// Accumulated dispersion of the standard transmission fiber (ps/nm/km).
pub const FIBER_PS_PER_NM_PER_KM: f64 = 8921.0 / 520.0;

/// Lossless quadratic-phase filter `exp(-j * beta2L * omega^2 / 2)`.
///
/// The inverse operator is the same filter with negated dispersion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionOperator {
    /// Accumulated dispersion (ps/nm). Negative values realize the inverse.
    pub total_ps_per_nm: f64,
    /// Carrier wavelength (m).
    pub center_wavelength: f64,
}

impl Default for DispersionOperator {
    fn default() -> Self {
        Self::new(0.0)
    }
}

impl DispersionOperator {
    pub fn new(total_ps_per_nm: f64) -> Self {
        Self { total_ps_per_nm, center_wavelength: DEFAULT_WAVELENGTH }
    }

    pub fn with_wavelength(mut self, wavelength: f64) -> Self {
        self.center_wavelength = wavelength;
        self
    }

    /// Dispersion accumulated over a fiber of `length_km`.
    pub fn fiber(length_km: f64, ps_per_nm_per_km: f64) -> Self {
        Self::new(length_km * ps_per_nm_per_km)
    }

    pub fn inverse(&self) -> Self {
        Self { total_ps_per_nm: -self.total_ps_per_nm, ..*self }
    }

    pub fn is_identity(&self) -> bool {
        self.total_ps_per_nm == 0.0
    }

    /// `beta2 * L` in s^2: `-D * lambda^2 / (2 pi c)` with D in s/m.
    pub fn beta2l(&self) -> f64 {
        let d_si = self.total_ps_per_nm * 1e-3;
        -d_si * self.center_wavelength.powi(2) / (2.0 * PI * SPEED_OF_LIGHT)
    }

    /// Composition of two dispersions (they commute).
    pub fn then(&self, other: &DispersionOperator) -> Self {
        Self { total_ps_per_nm: self.total_ps_per_nm + other.total_ps_per_nm, ..*self }
    }

    /// Response at angular frequency `omega` (rad/s).
    pub fn response(&self, omega: f64) -> Complex64 {
        Complex64::from_polar(1.0, -self.beta2l() * omega * omega / 2.0)
    }

    /// Response on the FFT grid of an `n`-point block at `sample_rate`.
    pub fn transfer(&self, n: usize, sample_rate: f64) -> Vec<Complex64> {
        bin_frequencies(n, sample_rate).into_iter().map(|f| self.response(2.0 * PI * f)).collect()
    }

    pub fn apply(&self, w: &ComplexWaveform) -> ComplexWaveform {
        apply_dispersion(w, self)
    }
}

/// Circular (whole-block) dispersion by FFT filtering.
pub fn apply_dispersion(w: &ComplexWaveform, d: &DispersionOperator) -> ComplexWaveform {
    if d.is_identity() {
        return w.clone();
    }
    let mut buf = w.samples.clone();
    FftPair::new(buf.len()).filter(&mut buf, &d.transfer(w.len(), w.sample_rate));
    w.with_samples(buf)
}

pub type Jones = [[Complex64; 2]; 2];

pub const JONES_IDENTITY: Jones =
    [[Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)], [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]];

pub fn jones_mul(a: &Jones, b: &Jones) -> Jones {
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn jones_apply(m: &Jones, x: Complex64, y: Complex64) -> (Complex64, Complex64) {
    (m[0][0] * x + m[0][1] * y, m[1][0] * x + m[1][1] * y)
}

/// Singular values `(max, min)` of a 2x2 complex matrix.
///
/// After rotating out the determinant phase, `fro -/+ 2 det` equal sums of
/// squared magnitudes, which keeps near-unitary matrices free of
/// cancellation.
pub fn singular_values(m: &Jones) -> (f64, f64) {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let rot = Complex64::from_polar(1.0, -det.arg() / 2.0);
    let (a, b, c, d) = (m[0][0] * rot, m[0][1] * rot, m[1][0] * rot, m[1][1] * rot);
    let minus = (a - d.conj()).norm_sqr() + (b + c.conj()).norm_sqr();
    let plus = (a + d.conj()).norm_sqr() + (b - c.conj()).norm_sqr();
    let (sp, sm) = (plus.sqrt(), minus.sqrt());
    ((sp + sm) / 2.0, ((sp - sm) / 2.0).max(0.0))
}

/// `20 log10(sigma_max / sigma_min)`; infinite for a singular matrix.
pub fn jones_pdl_db(m: &Jones) -> f64 {
    let (hi, lo) = singular_values(m);
    if lo <= hi * 1e-15 {
        return f64::INFINITY;
    }
    20.0 * (hi / lo).log10()
}

/// Haar-distributed 2x2 unitary.
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R) -> Jones {
    let mut v = [0.0f64; 4];
    loop {
        for x in v.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            v.iter_mut().for_each(|x| *x /= n);
            break;
        }
    }
    let a = Complex64::new(v[0], v[1]);
    let b = Complex64::new(v[2], v[3]);
    let phase = Complex64::from_polar(1.0, rng.random_range(-PI..PI));
    [[a * phase, -b.conj() * phase], [b * phase, a.conj() * phase]]
}

/// Rotation by `angle` between the x and y axes.
pub fn rotation(angle: f64) -> Jones {
    let (s, c) = angle.sin_cos();
    [[Complex64::new(c, 0.0), Complex64::new(-s, 0.0)], [Complex64::new(s, 0.0), Complex64::new(c, 0.0)]]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmdSection {
    pub jones: Jones,
    /// Differential group delay between the section axes (s).
    pub dgd: f64,
}

/// Parameters from which a [`PolarizationChannel`] is realized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolarizationChannelSpec {
    pub seed: u64,
    pub n_sections: usize,
    /// Sum of the section DGDs (s).
    pub total_dgd: f64,
}

impl Default for PolarizationChannelSpec {
    fn default() -> Self {
        Self { seed: 0, n_sections: 8, total_dgd: 5e-12 }
    }
}

/// Concatenation of random unitary rotations and birefringent sections.
///
/// Section `k` applies its rotation, then delays the y axis by `dgd` relative
/// to x (split symmetrically). The total response at angular frequency w is
/// `B_n(w) U_n ... B_1(w) U_1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarizationChannel {
    pub sections: Vec<PmdSection>,
}

impl PolarizationChannel {
    pub fn identity() -> Self {
        Self::flat(JONES_IDENTITY)
    }

    /// Frequency-flat channel with a single matrix.
    pub fn flat(jones: Jones) -> Self {
        Self { sections: vec![PmdSection { jones, dgd: 0.0 }] }
    }

    pub fn random(spec: &PolarizationChannelSpec) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        let n = spec.n_sections.max(1);
        let dgd = spec.total_dgd / n as f64;
        let mut sections: Vec<PmdSection> =
            (0..n).map(|_| PmdSection { jones: random_unitary(&mut rng), dgd }).collect();
        sections.push(PmdSection { jones: random_unitary(&mut rng), dgd: 0.0 });
        Self { sections }
    }

    /// Jones matrix at angular frequency `omega` (rad/s).
    pub fn jones_at(&self, omega: f64) -> Jones {
        let mut total = JONES_IDENTITY;
        for s in &self.sections {
            let half = omega * s.dgd / 2.0;
            let mut m = s.jones;
            let px = Complex64::from_polar(1.0, half);
            let py = Complex64::from_polar(1.0, -half);
            for v in m[0].iter_mut() {
                *v *= px;
            }
            for v in m[1].iter_mut() {
                *v *= py;
            }
            total = jones_mul(&m, &total);
        }
        total
    }

    /// Per-bin responses on an `n`-point FFT grid.
    pub fn transfer(&self, n: usize, sample_rate: f64) -> Vec<Jones> {
        bin_frequencies(n, sample_rate).into_iter().map(|f| self.jones_at(2.0 * PI * f)).collect()
    }

    /// Band-averaged PDL over `|f| <= bandwidth/2`.
    pub fn pdl_db(&self, n: usize, sample_rate: f64, bandwidth: f64) -> f64 {
        let freqs = bin_frequencies(n, sample_rate);
        let vals: Vec<f64> = freqs
            .iter()
            .filter(|f| f.abs() <= bandwidth / 2.0)
            .map(|f| jones_pdl_db(&self.jones_at(2.0 * PI * f)))
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

pub fn apply_polarization_channel(
    wx: &ComplexWaveform,
    wy: &ComplexWaveform,
    ch: &PolarizationChannel,
) -> Result<(ComplexWaveform, ComplexWaveform)> {
    ensure_same_len(wx.len(), wy.len())?;
    if wx.sample_rate != wy.sample_rate {
        return Err(Error::InvalidInput("polarizations sampled at different rates".into()));
    }
    let n = wx.len();
    let mut fft = FftPair::new(n);
    let mut x = wx.samples.clone();
    let mut y = wy.samples.clone();
    fft.forward(&mut x);
    fft.forward(&mut y);
    for (k, m) in ch.transfer(n, wx.sample_rate).iter().enumerate() {
        let (ox, oy) = jones_apply(m, x[k], y[k]);
        x[k] = ox;
        y[k] = oy;
    }
    fft.inverse(&mut x);
    fft.inverse(&mut y);
    Ok((wx.with_samples(x), wy.with_samples(y)))
}

/// Lumped receiver-side noise and converter model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Target OSNR (dB) in `reference_bandwidth`; `None` is noiseless.
    pub target_osnr_db: Option<f64>,
    pub reference_bandwidth: f64,
    /// Effective number of bits of the digitizer; `None` is ideal.
    pub enob: Option<f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { target_osnr_db: None, reference_bandwidth: REFERENCE_BANDWIDTH, enob: None }
    }
}

impl NoiseModel {
    pub fn osnr(osnr_db: f64) -> Self {
        Self { target_osnr_db: Some(osnr_db), ..Self::default() }
    }
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn lin_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Per-symbol SNR `Es/N0` implied by an OSNR: `OSNR * 2 B_ref / (p R_s)`.
///
/// OSNR counts ASE in both polarizations within `B_ref`; with `p` signal
/// polarizations each carries `1/p` of the signal power.
pub fn snr_from_osnr(osnr_db: f64, n_pol: usize, baud: f64, reference_bandwidth: f64) -> f64 {
    db_to_lin(osnr_db) * 2.0 * reference_bandwidth / (n_pol as f64 * baud)
}

/// Inverse of [`snr_from_osnr`], returning dB.
pub fn osnr_db_from_snr(snr: f64, n_pol: usize, baud: f64, reference_bandwidth: f64) -> f64 {
    lin_to_db(snr * n_pol as f64 * baud / (2.0 * reference_bandwidth))
}

/// Add circular white Gaussian noise over the full simulation band to every
/// polarization so the OSNR, defined on total signal power, hits the target.
pub fn load_noise<R: Rng + ?Sized>(waves: &mut [ComplexWaveform], model: &NoiseModel, rng: &mut R) -> Result<()> {
    let Some(osnr_db) = model.target_osnr_db else {
        return Ok(());
    };
    let first = waves.first().ok_or_else(|| Error::InvalidInput("no waveforms to load".into()))?;
    let fs = first.sample_rate;
    for w in waves.iter() {
        ensure_same_len(first.len(), w.len())?;
    }
    let signal_power: f64 = waves.iter().map(|w| w.mean_power()).sum();
    // ASE PSD per polarization: P / (2 B_ref OSNR)
    let psd = signal_power / (2.0 * model.reference_bandwidth * db_to_lin(osnr_db));
    let sigma = (psd * fs / 2.0).sqrt();
    for w in waves.iter_mut() {
        for z in w.samples.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *z += Complex64::new(re * sigma, im * sigma);
        }
    }
    Ok(())
}

/// Periodogram OSNR meter: noise PSD from bins outside `signal_bandwidth`
/// (two-sided, plus a small guard), signal power from the in-band excess.
pub fn measure_osnr_db(waves: &[ComplexWaveform], signal_bandwidth: f64, reference_bandwidth: f64) -> Result<f64> {
    let first = waves.first().ok_or_else(|| Error::InvalidInput("no waveforms to measure".into()))?;
    let n = first.len();
    let fs = first.sample_rate;
    let freqs = bin_frequencies(n, fs);
    let edge = signal_bandwidth / 2.0;
    let guard = 0.02 * fs;
    let mut fft = FftPair::new(n);
    let (mut sig, mut psd) = (0.0, 0.0);
    for w in waves {
        ensure_same_len(n, w.len())?;
        let mut buf = w.samples.clone();
        fft.forward(&mut buf);
        let (mut inb, mut n_in, mut outb, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (z, f) in buf.iter().zip(&freqs) {
            // per-bin power; sums to the mean sample power
            let p = z.norm_sqr() / (n as f64 * n as f64);
            if f.abs() <= edge {
                inb += p;
                n_in += 1;
            } else if f.abs() >= edge + guard {
                outb += p;
                n_out += 1;
            }
        }
        if n_out == 0 {
            return Err(Error::InvalidInput("no noise-only bins to estimate from".into()));
        }
        let per_bin = outb / n_out as f64;
        sig += inb - per_bin * n_in as f64;
        // per-bin power * bins-per-Hz = PSD in W/Hz
        psd += per_bin * n as f64 / fs;
    }
    let psd = psd / waves.len() as f64;
    Ok(lin_to_db(sig / (2.0 * psd * reference_bandwidth)))
}

pub fn photodetect(w: &ComplexWaveform) -> IntensityTrace {
    IntensityTrace { samples: w.samples.iter().map(|z| z.norm_sqr()).collect(), sample_rate: w.sample_rate }
}

/// SINAD of an ideal converter with `enob` bits, in dB.
pub fn sinad_db(enob: f64) -> f64 {
    6.02 * enob + 1.76
}

/// Converter noise as additive white Gaussian noise whose variance sets the
/// SINAD of a full-scale sine (peak-to-peak equal to the trace maximum) to
/// `6.02 enob + 1.76` dB. Outputs are clamped at zero.
pub fn quantize_enob<R: Rng + ?Sized>(t: &IntensityTrace, enob: f64, rng: &mut R) -> Result<IntensityTrace> {
    if !(enob > 0.0) {
        return Err(Error::InvalidInput("enob must be positive".into()));
    }
    if enob.is_infinite() {
        return Ok(t.clone());
    }
    let full_scale = t.max();
    let sine_power = full_scale * full_scale / 8.0;
    let sigma = (sine_power / db_to_lin(sinad_db(enob))).sqrt();
    let samples = t
        .samples
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            (v + sigma * n).max(0.0)
        })
        .collect();
    Ok(IntensityTrace { samples, sample_rate: t.sample_rate })
}

/// Relative RMS difference `||a - b|| / ||b||`.
pub fn relative_rms(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    (num / (mean_power(b) * b.len() as f64).max(f64::MIN_POSITIVE)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{build_frame, shape_pulse, Constellation, FrameSpec, Modulation};
    use proptest::prelude::*;

    fn qpsk_wave(seed: u64, n_sym: usize) -> ComplexWaveform {
        let spec = FrameSpec { n_payload_symbols: n_sym, ..FrameSpec::default() };
        let f = build_frame(seed, &spec, &Constellation::new(Modulation::Qpsk), 1).unwrap();
        shape_pulse(&f.symbols[0], &spec).unwrap()
    }

    /// Direct O(N^2) DFT-sum evaluation of the dispersion filter.
    fn dispersion_by_dft_sum(x: &[Complex64], d: &DispersionOperator, fs: f64) -> Vec<Complex64> {
        let n = x.len();
        let freqs = bin_frequencies(n, fs);
        let spectrum: Vec<Complex64> = (0..n)
            .map(|k| {
                (0..n)
                    .map(|m| x[m] * Complex64::from_polar(1.0, -2.0 * PI * (k * m) as f64 / n as f64))
                    .sum::<Complex64>()
                    * d.response(2.0 * PI * freqs[k])
            })
            .collect();
        (0..n)
            .map(|m| {
                (0..n)
                    .map(|k| spectrum[k] * Complex64::from_polar(1.0, 2.0 * PI * (k * m) as f64 / n as f64))
                    .sum::<Complex64>()
                    / n as f64
            })
            .collect()
    }

    #[test]
    fn beta2l_conversion_650() {
        // -0.65 s/m * (1550e-9 m)^2 / (2 pi c) in ps^2
        let b = DispersionOperator::new(650.0).beta2l() * 1e24;
        assert!((b + 828.97).abs() < 0.1, "{b}");
    }

    #[test]
    fn zero_dispersion_is_identity() {
        let w = qpsk_wave(1, 128);
        assert_eq!(apply_dispersion(&w, &DispersionOperator::new(0.0)), w);
    }

    #[test]
    fn fft_dispersion_matches_dft_sum() {
        let w = qpsk_wave(2, 128);
        let d = DispersionOperator::new(650.0);
        let fast = apply_dispersion(&w, &d);
        let slow = dispersion_by_dft_sum(&w.samples, &d, w.sample_rate);
        for (a, b) in fast.samples.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn dispersion_is_unitary_and_invertible() {
        let w = qpsk_wave(3, 1024);
        let d = DispersionOperator::new(1029.0);
        let fwd = apply_dispersion(&w, &d);
        assert!((fwd.mean_power() / w.mean_power() - 1.0).abs() < 1e-12);
        let back = apply_dispersion(&fwd, &d.inverse());
        assert!(relative_rms(&back.samples, &w.samples) < 1e-9);
    }

    #[test]
    fn dispersion_operators_commute() {
        let w = qpsk_wave(4, 512);
        let d1 = DispersionOperator::new(650.0);
        let d2 = DispersionOperator::new(-1300.0);
        let a = apply_dispersion(&apply_dispersion(&w, &d1), &d2);
        let b = apply_dispersion(&apply_dispersion(&w, &d2), &d1);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).norm() < 1e-10);
        }
    }

    #[test]
    fn pulse_spreads_over_eight_symbols() {
        let spec = FrameSpec::default();
        let mut syms = vec![Complex64::new(0.0, 0.0); 512];
        syms[256] = Complex64::new(1.0, 0.0);
        let w = shape_pulse(&syms, &spec).unwrap();
        let spread = |w: &ComplexWaveform| {
            let p: Vec<f64> = w.samples.iter().map(|z| z.norm_sqr()).collect();
            let total: f64 = p.iter().sum();
            // width containing 99% of the energy
            let mut cum = 0.0;
            let mut lo = 0;
            for (i, v) in p.iter().enumerate() {
                cum += v;
                if cum >= 0.005 * total {
                    lo = i;
                    break;
                }
            }
            cum = 0.0;
            let mut hi = 0;
            for (i, v) in p.iter().enumerate().rev() {
                cum += v;
                if cum >= 0.005 * total {
                    hi = i;
                    break;
                }
            }
            (hi - lo) as f64 / spec.samples_per_symbol as f64
        };
        let before = spread(&w);
        let after = spread(&apply_dispersion(&w, &DispersionOperator::new(650.0)));
        assert!(after > 8.0, "spread {after} symbols (undispersed {before})");
        assert!(after > before);
    }

    #[test]
    fn identity_and_swap_channels() {
        let wx = qpsk_wave(5, 256);
        let wy = qpsk_wave(6, 256);
        let (ox, oy) = apply_polarization_channel(&wx, &wy, &PolarizationChannel::identity()).unwrap();
        assert!(relative_rms(&ox.samples, &wx.samples) < 1e-12);
        assert!(relative_rms(&oy.samples, &wy.samples) < 1e-12);
        let (ox, oy) = apply_polarization_channel(&wx, &wy, &PolarizationChannel::flat(rotation(PI / 2.0))).unwrap();
        assert!(relative_rms(&ox.samples, &wy.samples.iter().map(|z| -z).collect::<Vec<_>>()) < 1e-12);
        assert!(relative_rms(&oy.samples, &wx.samples) < 1e-12);
    }

    #[test]
    fn channel_rejects_length_mismatch() {
        let wx = qpsk_wave(5, 256);
        let wy = qpsk_wave(6, 128);
        assert!(matches!(
            apply_polarization_channel(&wx, &wy, &PolarizationChannel::identity()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn random_pmd_channel_is_unitary_per_frequency() {
        let ch = PolarizationChannel::random(&PolarizationChannelSpec { seed: 9, n_sections: 8, total_dgd: 5e-12 });
        for f in bin_frequencies(256, 60e9) {
            let m = ch.jones_at(2.0 * PI * f);
            let mh = [[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]];
            let p = jones_mul(&mh, &m);
            for (i, row) in p.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((v - Complex64::new(expect, 0.0)).norm() < 1e-10);
                }
            }
        }
        assert!(ch.pdl_db(256, 60e9, 33e9).abs() < 1e-9);
        let wx = qpsk_wave(7, 512);
        let wy = qpsk_wave(8, 512);
        let (ox, oy) = apply_polarization_channel(&wx, &wy, &ch).unwrap();
        let ein = wx.mean_power() + wy.mean_power();
        let eout = ox.mean_power() + oy.mean_power();
        assert!((eout / ein - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_dgd_section_is_flat() {
        let ch = PolarizationChannel::random(&PolarizationChannelSpec { seed: 1, n_sections: 1, total_dgd: 0.0 });
        let m0 = ch.jones_at(0.0);
        let m1 = ch.jones_at(2.0 * PI * 10e9);
        for i in 0..2 {
            for j in 0..2 {
                assert!((m0[i][j] - m1[i][j]).norm() < 1e-12);
            }
        }
        assert!(jones_pdl_db(&m0).abs() < 1e-9);
    }

    #[test]
    fn pdl_closed_form() {
        let m = [
            [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            [Complex64::new(0.0, 0.0), Complex64::new(0.5, 0.0)],
        ];
        assert!((jones_pdl_db(&m) - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn noiseless_model_leaves_waveform() {
        let w = qpsk_wave(1, 128);
        let mut v = vec![w.clone()];
        load_noise(&mut v, &NoiseModel::default(), &mut ChaCha20Rng::seed_from_u64(0)).unwrap();
        assert_eq!(v[0], w);
    }

    #[test]
    fn osnr_meter_hits_target() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for target in [12.0, 20.0, 27.0] {
            let mut v = vec![qpsk_wave(10, 1 << 15)];
            load_noise(&mut v, &NoiseModel::osnr(target), &mut rng).unwrap();
            let m = measure_osnr_db(&v, 33e9, REFERENCE_BANDWIDTH).unwrap();
            assert!((m - target).abs() < 0.1, "target {target} measured {m}");
        }
        // dual polarization shares one OSNR on total power
        let mut v = vec![qpsk_wave(11, 1 << 15), qpsk_wave(12, 1 << 15)];
        load_noise(&mut v, &NoiseModel::osnr(20.0), &mut rng).unwrap();
        let m = measure_osnr_db(&v, 33e9, REFERENCE_BANDWIDTH).unwrap();
        assert!((m - 20.0).abs() < 0.1, "dual-pol measured {m}");
    }

    #[test]
    fn snr_mapping_matches_loaded_noise() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let w = qpsk_wave(13, 1 << 15);
        let mut v = vec![w.clone()];
        load_noise(&mut v, &NoiseModel::osnr(15.0), &mut rng).unwrap();
        let noise: Vec<Complex64> = v[0].samples.iter().zip(&w.samples).map(|(a, b)| a - b).collect();
        // Es / N0 with Es = P / Rs and N0 = sigma^2 / fs
        let es = w.mean_power() / 30e9;
        let n0 = mean_power(&noise) / w.sample_rate;
        let analytic = snr_from_osnr(15.0, 1, 30e9, REFERENCE_BANDWIDTH);
        assert!((lin_to_db(es / n0) - lin_to_db(analytic)).abs() < 0.1);
        assert!((osnr_db_from_snr(analytic, 1, 30e9, REFERENCE_BANDWIDTH) - 15.0).abs() < 1e-12);
        assert!((snr_from_osnr(15.0, 2, 30e9, REFERENCE_BANDWIDTH) * 2.0 - analytic).abs() < 1e-9);
        // 30 Gbaud single polarization: SNR is 0.79 dB below OSNR
        assert!((lin_to_db(analytic) - 15.0 - lin_to_db(25.0 / 30.0)).abs() < 1e-12);
    }

    #[test]
    fn photodetection_basics() {
        let zero = ComplexWaveform::new(vec![Complex64::new(0.0, 0.0); 8], 1.0, 1.0).unwrap();
        assert!(photodetect(&zero).samples.iter().all(|&v| v == 0.0));
        let cw = ComplexWaveform::new(vec![Complex64::from_polar(1.0, 0.7); 8], 1.0, 1.0).unwrap();
        assert!(photodetect(&cw).samples.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let w = qpsk_wave(3, 256);
        assert!((photodetect(&w).mean() - w.mean_power()).abs() < 1e-12);
    }

    #[test]
    fn enob_sinad_on_full_scale_sine() {
        let n = 1 << 16;
        let t = IntensityTrace {
            samples: (0..n).map(|k| 0.5 * (1.0 + (2.0 * PI * 0.0123 * k as f64).sin())).collect(),
            sample_rate: 1.0,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let q = quantize_enob(&t, 5.3, &mut rng).unwrap();
        let err: f64 = q.samples.iter().zip(&t.samples).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        let sine_power = t.max().powi(2) / 8.0;
        let measured = lin_to_db(sine_power / err);
        assert!((measured - 33.7).abs() < 0.3, "SINAD {measured}");
        assert_eq!(quantize_enob(&t, f64::INFINITY, &mut rng).unwrap(), t);
        assert!(quantize_enob(&t, 0.0, &mut rng).is_err());
    }

    #[test]
    fn more_bits_less_noise() {
        let t = photodetect(&qpsk_wave(4, 2048));
        let noise = |enob| {
            let mut rng = ChaCha20Rng::seed_from_u64(8);
            let q = quantize_enob(&t, enob, &mut rng).unwrap();
            q.samples.iter().zip(&t.samples).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        assert!(noise(8.0) < noise(5.3));
    }

    proptest! {
        #[test]
        fn forward_then_inverse_is_identity(seed in any::<u64>(), d in -9000.0f64..9000.0) {
            let w = qpsk_wave(seed, 256);
            let op = DispersionOperator::new(d);
            let back = apply_dispersion(&apply_dispersion(&w, &op), &op.inverse());
            prop_assert!(relative_rms(&back.samples, &w.samples) < 1e-9);
        }

        #[test]
        fn unitary_channels_have_zero_pdl(seed in any::<u64>(), sections in 1usize..10) {
            let ch = PolarizationChannel::random(&PolarizationChannelSpec { seed, n_sections: sections, total_dgd: 10e-12 });
            prop_assert!(ch.pdl_db(128, 60e9, 33e9).abs() < 1e-9);
        }
    }
}
