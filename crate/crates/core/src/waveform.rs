//! Transmit side: Gray-labeled constellations, framing with pilots and
//! training, and raised-cosine pulse shaping.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{bin_frequencies, FftPair};

/// Seed of the receiver-known training sequence. Shared by every frame.
const TRAINING_SEED: u64 = 0x5452_4149_4e49_4e47;

/// Default optical carrier wavelength (m).
pub const DEFAULT_WAVELENGTH: f64 = 1550e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Qpsk,
    Qam16,
    Qam64,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
            Modulation::Qam64 => 6,
        }
    }
}

/// Square Gray-labeled constellation with unit average power.
///
/// Each axis carries half of the bits as a Gray-coded PAM level. The first
/// (most significant) half of a label selects the in-phase level, the second
/// half the quadrature level. Level index `i` of an `L`-level axis sits at
/// amplitude `L - 1 - 2i`, so the all-zero label is the upper-right corner:
/// for QPSK, bits `00` map to `(1 + j)/sqrt(2)`, `01` to `(1 - j)/sqrt(2)`,
/// `10` to `(-1 + j)/sqrt(2)` and `11` to `(-1 - j)/sqrt(2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    modulation: Modulation,
    /// Indexed by bit label.
    points: Vec<Complex64>,
    levels: usize,
    scale: f64,
}

fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

impl Constellation {
    pub fn new(modulation: Modulation) -> Self {
        let bps = modulation.bits_per_symbol();
        let levels = 1usize << (bps / 2);
        let scale = (2.0 * ((levels * levels - 1) as f64) / 3.0).sqrt();
        let mut points = vec![Complex64::new(0.0, 0.0); 1 << bps];
        for i in 0..levels {
            for q in 0..levels {
                let label = (gray(i) << (bps / 2)) | gray(q);
                points[label] =
                    Complex64::new((levels - 1) as f64 - 2.0 * i as f64, (levels - 1) as f64 - 2.0 * q as f64) / scale;
            }
        }
        Self { modulation, points, levels, scale }
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.modulation.bits_per_symbol()
    }

    /// Points indexed by their bit label.
    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, label: usize) -> Complex64 {
        self.points[label]
    }

    /// Nearest-point hard decision, returning the bit label.
    pub fn decide(&self, z: Complex64) -> usize {
        let half = self.bits_per_symbol() / 2;
        (self.axis_decision(z.re) << half) | self.axis_decision(z.im)
    }

    fn axis_decision(&self, x: f64) -> usize {
        let top = (self.levels - 1) as f64;
        let idx = ((top - x * self.scale) / 2.0).round().clamp(0.0, top) as usize;
        gray(idx)
    }

    /// Nearest constellation point.
    pub fn slice(&self, z: Complex64) -> Complex64 {
        self.points[self.decide(z)]
    }

    pub fn label_to_bits(&self, label: usize, out: &mut Vec<bool>) {
        let bps = self.bits_per_symbol();
        for b in (0..bps).rev() {
            out.push((label >> b) & 1 == 1);
        }
    }
}

/// Map bits to symbols, most significant bit of each group first.
pub fn map_bits(bits: &[bool], c: &Constellation) -> Result<Vec<Complex64>> {
    let bps = c.bits_per_symbol();
    if !bits.len().is_multiple_of(bps) {
        return Err(Error::InvalidInput(format!("{} bits is not a multiple of {bps} bits per symbol", bits.len())));
    }
    Ok(bits
        .chunks(bps)
        .map(|group| {
            let label = group.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            c.point(label)
        })
        .collect())
}

/// Hard-decision Gray demapping.
pub fn demap(symbols: &[Complex64], c: &Constellation) -> Vec<bool> {
    let mut out = Vec::with_capacity(symbols.len() * c.bits_per_symbol());
    for &z in symbols {
        c.label_to_bits(c.decide(z), &mut out);
    }
    out
}

/// How pilot symbol amplitudes are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotAmplitude {
    /// Pilot is a constellation point.
    #[default]
    Constellation,
    /// Pilot carries a constellation phase with unit magnitude.
    Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameSpec {
    pub n_training_symbols: usize,
    pub n_payload_symbols: usize,
    pub pilot_overhead: f64,
    pub baud_rate: f64,
    pub samples_per_symbol: usize,
    pub rolloff: f64,
    pub pilot_amplitude: PilotAmplitude,
    pub center_wavelength: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            n_training_symbols: 0,
            n_payload_symbols: 1 << 11,
            pilot_overhead: 0.2,
            baud_rate: 30e9,
            samples_per_symbol: 2,
            rolloff: 0.1,
            pilot_amplitude: PilotAmplitude::Constellation,
            center_wavelength: DEFAULT_WAVELENGTH,
        }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_symbol < 2 {
            return Err(Error::Config("samples_per_symbol must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.rolloff) {
            return Err(Error::Config("rolloff must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.pilot_overhead) {
            return Err(Error::Config("pilot_overhead must lie in [0, 1)".into()));
        }
        if self.n_training_symbols + self.n_payload_symbols == 0 {
            return Err(Error::Config("frame has no symbols".into()));
        }
        if !(self.baud_rate > 0.0) {
            return Err(Error::Config("baud_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn n_symbols(&self) -> usize {
        self.n_training_symbols + self.n_payload_symbols
    }

    pub fn n_samples(&self) -> usize {
        self.n_symbols() * self.samples_per_symbol
    }

    pub fn sample_rate(&self) -> f64 {
        self.baud_rate * self.samples_per_symbol as f64
    }

    /// Two-sided occupied bandwidth `(1 + rolloff) * baud`.
    pub fn occupied_bandwidth(&self) -> f64 {
        (1.0 + self.rolloff) * self.baud_rate
    }

    /// Pilot spacing in symbols, `round(1 / overhead)`; `None` without pilots.
    pub fn pilot_spacing(&self) -> Option<usize> {
        (self.pilot_overhead > 0.0).then(|| (1.0 / self.pilot_overhead).round().max(1.0) as usize)
    }

    /// Pilot positions as payload-relative indices.
    pub fn pilot_positions(&self) -> Vec<usize> {
        match self.pilot_spacing() {
            Some(step) => (0..self.n_payload_symbols).step_by(step).collect(),
            None => Vec::new(),
        }
    }
}

/// Symbols of every polarization plus the bits they carry.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolFrame {
    pub spec: FrameSpec,
    pub modulation: Modulation,
    /// One symbol sequence per polarization (training then payload).
    pub symbols: Vec<Vec<Complex64>>,
    /// True at pilot positions (frame-absolute indexing).
    pub pilot_mask: Vec<bool>,
    /// Bits of each symbol, per polarization. Pilot bits are included but
    /// never counted.
    pub bit_truth: Vec<Vec<bool>>,
}

impl SymbolFrame {
    pub fn n_pol(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_training(&self) -> usize {
        self.spec.n_training_symbols
    }

    /// Frame-absolute pilot indices.
    pub fn pilot_indices(&self) -> Vec<usize> {
        self.pilot_mask.iter().enumerate().filter_map(|(i, &p)| p.then_some(i)).collect()
    }

    /// Frame-absolute indices of payload symbols that carry counted data.
    pub fn data_indices(&self) -> Vec<usize> {
        (self.n_training()..self.pilot_mask.len()).filter(|&i| !self.pilot_mask[i]).collect()
    }

    pub fn constellation(&self) -> Constellation {
        Constellation::new(self.modulation)
    }
}

fn random_symbols(rng: &mut ChaCha20Rng, c: &Constellation, n: usize, bits: &mut Vec<bool>) -> Vec<Complex64> {
    let m = c.points().len();
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..m);
            c.label_to_bits(label, bits);
            c.point(label)
        })
        .collect()
}

/// Build a deterministic frame: a fixed training block followed by payload
/// with pilots every `round(1/overhead)` symbols starting at payload index 0.
pub fn build_frame(seed: u64, spec: &FrameSpec, c: &Constellation, n_pol: usize) -> Result<SymbolFrame> {
    spec.validate()?;
    if n_pol == 0 {
        return Err(Error::InvalidInput("at least one polarization required".into()));
    }
    let n_train = spec.n_training_symbols;
    let mut pilot_mask = vec![false; spec.n_symbols()];
    for p in spec.pilot_positions() {
        pilot_mask[n_train + p] = true;
    }
    let mut symbols = Vec::with_capacity(n_pol);
    let mut bit_truth = Vec::with_capacity(n_pol);
    for pol in 0..n_pol {
        let mut bits = Vec::with_capacity(spec.n_symbols() * c.bits_per_symbol());
        let mut train_rng = ChaCha20Rng::seed_from_u64(TRAINING_SEED ^ pol as u64);
        let mut syms = random_symbols(&mut train_rng, c, n_train, &mut bits);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(pol as u64 + 1);
        syms.extend(random_symbols(&mut rng, c, spec.n_payload_symbols, &mut bits));
        if spec.pilot_amplitude == PilotAmplitude::Unit {
            for (s, _) in syms.iter_mut().zip(&pilot_mask).filter(|(_, &p)| p) {
                *s /= s.norm();
            }
        }
        symbols.push(syms);
        bit_truth.push(bits);
    }
    Ok(SymbolFrame { spec: spec.clone(), modulation: c.modulation(), symbols, pilot_mask, bit_truth })
}

/// Uniformly sampled complex baseband field.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexWaveform {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
    pub center_wavelength: f64,
}

impl ComplexWaveform {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64, center_wavelength: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform is empty".into()));
        }
        if samples.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("waveform holds non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate, center_wavelength })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        mean_power(&self.samples)
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Vec<Complex64>) -> Self {
        Self { samples, sample_rate: self.sample_rate, center_wavelength: self.center_wavelength }
    }

    /// Every `step`-th sample starting at `offset`.
    pub fn decimate(&self, step: usize, offset: usize) -> Vec<Complex64> {
        self.samples.iter().skip(offset).step_by(step).copied().collect()
    }
}

/// Real photodetected sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityTrace {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl IntensityTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len().max(1) as f64
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v * factor).collect(), sample_rate: self.sample_rate }
    }
}

pub fn mean_power(x: &[Complex64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>() / x.len().max(1) as f64
}

/// Raised-cosine amplitude response at frequency `f` for symbol rate `baud`.
pub fn raised_cosine_response(f: f64, baud: f64, rolloff: f64) -> f64 {
    let f = f.abs();
    let lo = (1.0 - rolloff) * baud / 2.0;
    let hi = (1.0 + rolloff) * baud / 2.0;
    if f <= lo {
        1.0
    } else if f >= hi {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI / (rolloff * baud) * (f - lo)).cos())
    }
}

/// Raised-cosine pulse shaping by frequency-domain filtering of the
/// zero-stuffed symbol stream. The result is periodic over the block, ISI
/// free at symbol instants `k * samples_per_symbol` and strictly band-limited
/// to `(1 + rolloff) * baud / 2`.
pub fn shape_pulse(symbols: &[Complex64], spec: &FrameSpec) -> Result<ComplexWaveform> {
    spec.validate()?;
    if symbols.is_empty() {
        return Err(Error::InvalidInput("no symbols to shape".into()));
    }
    let sps = spec.samples_per_symbol;
    let n = symbols.len() * sps;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (k, &s) in symbols.iter().enumerate() {
        buf[k * sps] = s;
    }
    let filter: Vec<Complex64> = bin_frequencies(n, spec.sample_rate())
        .into_iter()
        .map(|f| Complex64::new(sps as f64 * raised_cosine_response(f, spec.baud_rate, spec.rolloff), 0.0))
        .collect();
    FftPair::new(n).filter(&mut buf, &filter);
    ComplexWaveform::new(buf, spec.sample_rate(), spec.center_wavelength)
}

/// Sidecar describing a binary sample file.
///
/// Complex files hold `(re, im)` pairs of little-endian `f64`, one
/// polarization after another. Intensity files hold little-endian `f64`,
/// one channel after another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFileHeader {
    pub kind: SampleKind,
    pub sample_rate: f64,
    pub center_wavelength: f64,
    /// Samples per channel.
    pub length: usize,
    /// Polarizations (complex) or traces (intensity).
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Complex,
    Intensity,
}

fn write_header(path: &Path, h: &SampleFileHeader) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, h)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<SampleFileHeader> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn write_f64s<'a>(path: &Path, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::LengthMismatch { expected: expected * 8, got: bytes.len() });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Write polarizations of equal length and rate to `data` with a sidecar.
pub fn write_waveforms(pols: &[ComplexWaveform], header: &Path, data: &Path) -> Result<()> {
    let first = pols.first().ok_or_else(|| Error::InvalidInput("no waveforms to write".into()))?;
    for w in pols {
        crate::error::ensure_same_len(first.len(), w.len())?;
    }
    write_header(
        header,
        &SampleFileHeader {
            kind: SampleKind::Complex,
            sample_rate: first.sample_rate,
            center_wavelength: first.center_wavelength,
            length: first.len(),
            channels: pols.len(),
        },
    )?;
    let flat: Vec<f64> = pols.iter().flat_map(|w| w.samples.iter().flat_map(|z| [z.re, z.im])).collect();
    write_f64s(data, flat.iter())
}

pub fn read_waveforms(header: &Path, data: &Path) -> Result<Vec<ComplexWaveform>> {
    let h = read_header(header)?;
    if h.kind != SampleKind::Complex {
        return Err(Error::InvalidInput(format!("{} does not describe complex samples", header.display())));
    }
    let v = read_f64s(data, 2 * h.length * h.channels)?;
    v.chunks_exact(2 * h.length.max(1))
        .take(h.channels)
        .map(|c| {
            let samples = c.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
            ComplexWaveform::new(samples, h.sample_rate, h.center_wavelength)
        })
        .collect()
}

/// Write traces of equal length and rate to `data` with a sidecar.
pub fn write_intensities(traces: &[&IntensityTrace], center_wavelength: f64, header: &Path, data: &Path) -> Result<()> {
    let first = traces.first().ok_or_else(|| Error::InvalidInput("no traces to write".into()))?;
    for t in traces {
        crate::error::ensure_same_len(first.len(), t.len())?;
    }
    write_header(
        header,
        &SampleFileHeader {
            kind: SampleKind::Intensity,
            sample_rate: first.sample_rate,
            center_wavelength,
            length: first.len(),
            channels: traces.len(),
        },
    )?;
    write_f64s(data, traces.iter().flat_map(|t| t.samples.iter()))
}

/// Read intensity traces. `header` may describe a single channel shared by
/// several data files, as for separately stored `a` and `b` traces.
pub fn read_intensities(header: &Path, data: &Path) -> Result<Vec<IntensityTrace>> {
    let h = read_header(header)?;
    if h.kind != SampleKind::Intensity {
        return Err(Error::InvalidInput(format!("{} does not describe intensity samples", header.display())));
    }
    let v = read_f64s(data, h.length * h.channels)?;
    Ok(v.chunks_exact(h.length.max(1))
        .take(h.channels)
        .map(|c| IntensityTrace { samples: c.to_vec(), sample_rate: h.sample_rate })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::fft;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn bits_from(seed: u64, n: usize) -> Vec<bool> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<bool>()).collect()
    }

    #[test]
    fn qpsk_convention_anchor() {
        let c = Constellation::new(Modulation::Qpsk);
        let s = map_bits(&[false, false], &c).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[0] - Complex64::new(r, r)).norm() < 1e-15);
        let s = map_bits(&[true, true], &c).unwrap();
        assert!((s[0] - Complex64::new(-r, -r)).norm() < 1e-15);
    }

    #[test]
    fn constellations_have_unit_power_and_distinct_points() {
        for m in [Modulation::Qpsk, Modulation::Qam16, Modulation::Qam64] {
            let c = Constellation::new(m);
            let p = c.points();
            assert_eq!(p.len(), 1 << m.bits_per_symbol());
            assert!((mean_power(p) - 1.0).abs() < 1e-12);
            for i in 0..p.len() {
                for j in i + 1..p.len() {
                    assert!((p[i] - p[j]).norm() > 1e-6);
                }
            }
        }
    }

    #[test]
    fn qam16_exhaustive_closure() {
        let c = Constellation::new(Modulation::Qam16);
        let mut bits = Vec::new();
        for label in 0..16 {
            c.label_to_bits(label, &mut bits);
        }
        let s = map_bits(&bits, &c).unwrap();
        assert_eq!(s.len(), 16);
        assert!((mean_power(&s) - 1.0).abs() < 1e-12);
        assert_eq!(demap(&s, &c), bits);
    }

    #[test]
    fn gray_neighbors_differ_in_one_bit() {
        for m in [Modulation::Qpsk, Modulation::Qam16, Modulation::Qam64] {
            let c = Constellation::new(m);
            let p = c.points();
            let dmin = 2.0 / c.scale;
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if ((p[i] - p[j]).norm() - dmin).abs() < 1e-9 {
                        assert_eq!((i ^ j).count_ones(), 1, "{m:?} labels {i} {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn qam64_round_trip_6000_bits() {
        let c = Constellation::new(Modulation::Qam64);
        let bits = bits_from(7, 6000);
        assert_eq!(demap(&map_bits(&bits, &c).unwrap(), &c), bits);
    }

    #[test]
    fn map_bits_rejects_partial_groups() {
        let c = Constellation::new(Modulation::Qam16);
        assert!(matches!(map_bits(&[true; 6], &c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pilot_spacing_follows_overhead() {
        let mut spec = FrameSpec { n_payload_symbols: 100, ..FrameSpec::default() };
        spec.pilot_overhead = 0.2;
        assert_eq!(spec.pilot_positions(), (0..100).step_by(5).collect::<Vec<_>>());
        spec.pilot_overhead = 0.1;
        assert_eq!(spec.pilot_positions(), (0..100).step_by(10).collect::<Vec<_>>());
        let spec = FrameSpec { n_payload_symbols: 64, pilot_overhead: 0.125, ..FrameSpec::default() };
        assert_eq!(spec.pilot_positions().len(), 8);
        let spec = FrameSpec { pilot_overhead: 0.0, ..FrameSpec::default() };
        assert!(spec.pilot_positions().is_empty());
    }

    #[test]
    fn frames_are_reproducible_and_training_is_shared() {
        let c = Constellation::new(Modulation::Qpsk);
        let spec = FrameSpec { n_training_symbols: 64, n_payload_symbols: 256, ..FrameSpec::default() };
        let f1 = build_frame(11, &spec, &c, 2).unwrap();
        let f2 = build_frame(11, &spec, &c, 2).unwrap();
        let f3 = build_frame(12, &spec, &c, 2).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.symbols[0][..64], f3.symbols[0][..64]);
        assert_ne!(f1.symbols[0][64..], f3.symbols[0][64..]);
        assert_ne!(f1.symbols[0], f1.symbols[1]);
        assert_eq!(f1.symbols[0].len(), 320);
        assert!(f1.pilot_mask[..64].iter().all(|&p| !p));
        assert_eq!(f1.pilot_indices()[0], 64);
        assert_eq!(f1.data_indices().len(), 256 - 52);
    }

    #[test]
    fn unit_pilots_have_unit_magnitude() {
        let c = Constellation::new(Modulation::Qam16);
        let spec = FrameSpec { n_payload_symbols: 200, pilot_amplitude: PilotAmplitude::Unit, ..FrameSpec::default() };
        let f = build_frame(3, &spec, &c, 1).unwrap();
        for i in f.pilot_indices() {
            assert!((f.symbols[0][i].norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_pulse_is_nyquist() {
        let spec = FrameSpec::default();
        let mut syms = vec![Complex64::new(0.0, 0.0); 256];
        syms[100] = Complex64::new(1.0, 0.0);
        let w = shape_pulse(&syms, &spec).unwrap();
        assert!((w.samples[200] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        for k in (0..256).filter(|&k| k != 100) {
            assert!(w.samples[2 * k].norm() < 1e-10, "ISI at symbol {k}");
        }
    }

    #[test]
    fn shaped_qpsk_occupies_33_ghz() {
        let c = Constellation::new(Modulation::Qpsk);
        let spec = FrameSpec::default();
        let frame = build_frame(1, &spec, &c, 1).unwrap();
        let w = shape_pulse(&frame.symbols[0], &spec).unwrap();
        assert_eq!(w.len(), 4096);
        assert!((w.sample_rate - 60e9).abs() < 1.0);
        assert!((spec.occupied_bandwidth() - 33e9).abs() < 1.0);
        let spec_pow: Vec<f64> = fft(&w.samples).iter().map(|z| z.norm_sqr()).collect();
        let freqs = bin_frequencies(w.len(), w.sample_rate);
        let (mut inb, mut outb) = (0.0, 0.0);
        for (p, f) in spec_pow.iter().zip(&freqs) {
            if f.abs() <= 16.5e9 {
                inb += p;
            } else {
                outb += p;
            }
        }
        assert!(outb <= inb * 1e-4, "out-of-band {outb} vs {inb}");
    }

    proptest! {
        #[test]
        fn map_demap_round_trip(seed in any::<u64>(), m in 0usize..3, n in 1usize..200) {
            let m = [Modulation::Qpsk, Modulation::Qam16, Modulation::Qam64][m];
            let c = Constellation::new(m);
            let bits = bits_from(seed, n * c.bits_per_symbol());
            prop_assert_eq!(demap(&map_bits(&bits, &c).unwrap(), &c), bits);
        }

        #[test]
        fn shaping_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let spec = FrameSpec { n_payload_symbols: 128, ..FrameSpec::default() };
            let c = Constellation::new(Modulation::Qam16);
            let x = build_frame(seed, &spec, &c, 2).unwrap();
            let (x, y) = (&x.symbols[0], &x.symbols[1]);
            let ca = Complex64::new(a, 0.3);
            let cb = Complex64::new(-0.5, b);
            let mix: Vec<Complex64> = x.iter().zip(y).map(|(p, q)| ca * p + cb * q).collect();
            let wm = shape_pulse(&mix, &spec).unwrap();
            let wx = shape_pulse(x, &spec).unwrap();
            let wy = shape_pulse(y, &spec).unwrap();
            for i in 0..wm.len() {
                prop_assert!((wm.samples[i] - (ca * wx.samples[i] + cb * wy.samples[i])).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn sample_files_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (h, d) = (dir.path().join("w.json"), dir.path().join("w.bin"));
        let w = |k: f64| {
            ComplexWaveform::new((0..5).map(|i| Complex64::new(i as f64 * k, -0.1 / k)).collect(), 60e9, 1550e-9)
                .unwrap()
        };
        let pols = vec![w(1.5), w(std::f64::consts::PI)];
        write_waveforms(&pols, &h, &d).unwrap();
        assert_eq!(std::fs::metadata(&d).unwrap().len(), 2 * 5 * 16);
        assert_eq!(read_waveforms(&h, &d).unwrap(), pols);
        let t = IntensityTrace { samples: vec![0.25, 1.0 / 3.0, 7.0], sample_rate: 60e9 };
        write_intensities(&[&t, &t], 1550e-9, &h, &d).unwrap();
        let back = read_intensities(&h, &d).unwrap();
        assert_eq!(back, vec![t.clone(), t]);
        std::fs::write(&d, [0u8; 7]).unwrap();
        assert!(matches!(read_intensities(&h, &d), Err(Error::LengthMismatch { .. })));
        assert!(read_waveforms(&h, &d).is_err());
    }
}
