//! Conventional coherent back end for retrieved fields: chromatic-dispersion
//! compensation, 2x2 frequency-domain equalization (data-aided LMS, then
//! CMA), carrier-phase recovery, BER counting and overlap-save blocking.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_dispersion, snr_from_osnr, DispersionOperator, REFERENCE_BANDWIDTH};
use crate::error::{Error, Result};
use crate::fft::FftPair;
use crate::waveform::{mean_power, ComplexWaveform, Constellation, Modulation, SymbolFrame};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Undo the transmission-fiber dispersion.
pub fn compensate_cd(w: &ComplexWaveform, link_cd: &DispersionOperator) -> ComplexWaveform {
    apply_dispersion(w, &link_cd.inverse())
}

/// Scale `x` to unit mean power in place. All-zero input is left alone.
pub fn normalize_power(x: &mut [Complex64]) {
    let p = mean_power(x);
    if p > 0.0 {
        let g = 1.0 / p.sqrt();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqualizerMode {
    DataAidedLms,
    Cma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EqualizerConfig {
    /// FFT length of one equalizer block (symbols); half of it is new data.
    pub block_len: usize,
    /// Symbol-spaced taps per filter, at most `block_len / 2`.
    pub n_taps: usize,
    pub lms_step: f64,
    pub cma_step: f64,
    /// Passes of data-aided LMS over the training block.
    pub training_passes: usize,
    /// Abort when block output power exceeds this multiple of input power.
    pub divergence_ratio: f64,
}

impl Default for EqualizerConfig {
    fn default() -> Self {
        Self { block_len: 256, n_taps: 15, lms_step: 1e-3, cma_step: 1e-4, training_passes: 1, divergence_ratio: 10.0 }
    }
}

impl EqualizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_len < 4 || !self.block_len.is_power_of_two() {
            return Err(Error::Config("equalizer block_len must be a power of two >= 4".into()));
        }
        if self.n_taps == 0 || self.n_taps > self.block_len / 2 {
            return Err(Error::Config("n_taps must lie in [1, block_len / 2]".into()));
        }
        if !(self.lms_step > 0.0) || !(self.cma_step > 0.0) {
            return Err(Error::Config("equalizer steps must be positive".into()));
        }
        if !(self.divergence_ratio > 1.0) {
            return Err(Error::Config("divergence_ratio must exceed 1".into()));
        }
        Ok(())
    }
}

/// Adaptive 2x2 butterfly with symbol-spaced taps, filtered block-wise in
/// the frequency domain (overlap-save, FFT length `block_len`).
#[derive(Clone, Debug)]
pub struct EqualizerState {
    /// Time-domain taps `taps[out][in]`, center tap at `n_taps / 2`.
    pub taps: [[Vec<Complex64>; 2]; 2],
    pub mode: EqualizerMode,
    pub step_size: f64,
    block_len: usize,
    divergence_ratio: f64,
    fft: FftPair,
}

impl EqualizerState {
    /// Identity butterfly: unit center tap on the diagonal.
    pub fn identity(cfg: &EqualizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut taps: [[Vec<Complex64>; 2]; 2] = Default::default();
        for (i, row) in taps.iter_mut().enumerate() {
            for (j, t) in row.iter_mut().enumerate() {
                *t = vec![ZERO; cfg.n_taps];
                if i == j {
                    t[cfg.n_taps / 2] = Complex64::new(1.0, 0.0);
                }
            }
        }
        Ok(Self {
            taps,
            mode: EqualizerMode::DataAidedLms,
            step_size: cfg.lms_step,
            block_len: cfg.block_len,
            divergence_ratio: cfg.divergence_ratio,
            fft: FftPair::new(cfg.block_len),
        })
    }

    pub fn n_taps(&self) -> usize {
        self.taps[0][0].len()
    }

    /// New symbols produced per block.
    pub fn hop(&self) -> usize {
        self.block_len / 2
    }

    /// Frequency response of every filter on the block grid.
    pub fn frequency_taps(&mut self) -> [[Vec<Complex64>; 2]; 2] {
        let mut out: [[Vec<Complex64>; 2]; 2] = Default::default();
        for i in 0..2 {
            for j in 0..2 {
                let mut buf = vec![ZERO; self.block_len];
                buf[..self.n_taps()].copy_from_slice(&self.taps[i][j]);
                self.fft.forward(&mut buf);
                out[i][j] = buf;
            }
        }
        out
    }

    /// Filter the outputs `k0..k0 + hop` (clipped to the input length),
    /// adapting on every output for which an error can be formed.
    /// `desired` supplies reference symbols in data-aided mode.
    fn process_block(
        &mut self,
        x: [&[Complex64]; 2],
        k0: usize,
        desired: Option<[&[Complex64]; 2]>,
        adapt_until: usize,
        r2: f64,
        out: &mut [Vec<Complex64>; 2],
    ) -> Result<()> {
        let hop = self.hop();
        let n = x[0].len();
        let c = self.n_taps() / 2;
        let n0 = (k0 + c) as isize;
        let w = self.frequency_taps();
        let mut segs: [Vec<Complex64>; 2] = Default::default();
        let mut in_power = 0.0;
        for (j, seg) in segs.iter_mut().enumerate() {
            *seg = (0..self.block_len)
                .map(|t| {
                    let idx = n0 - hop as isize + t as isize;
                    if idx >= 0 && (idx as usize) < n {
                        x[j][idx as usize]
                    } else {
                        ZERO
                    }
                })
                .collect();
            in_power += mean_power(&seg[hop..]);
            self.fft.forward(seg);
        }
        let mut y: [Vec<Complex64>; 2] = Default::default();
        let mut out_power = 0.0;
        for i in 0..2 {
            let mut buf: Vec<Complex64> =
                (0..self.block_len).map(|f| w[i][0][f] * segs[0][f] + w[i][1][f] * segs[1][f]).collect();
            self.fft.inverse(&mut buf);
            y[i] = buf[hop..].to_vec();
            out_power += mean_power(&y[i]);
        }
        if out_power > self.divergence_ratio * in_power.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged(format!(
                "equalizer output power {:.3e} exceeds {} x input {:.3e} at symbol {}",
                out_power, self.divergence_ratio, in_power, k0
            )));
        }
        let valid = hop.min(n.saturating_sub(k0));
        let adapt = hop.min(adapt_until.saturating_sub(k0));
        for i in 0..2 {
            out[i].extend_from_slice(&y[i][..valid]);
        }
        if adapt == 0 {
            return Ok(());
        }
        for i in 0..2 {
            let mut e = vec![ZERO; self.block_len];
            for t in 0..adapt {
                let yt = y[i][t];
                e[hop + t] = match (self.mode, desired) {
                    (EqualizerMode::DataAidedLms, Some(d)) => d[i][k0 + t] - yt,
                    _ => yt * (r2 - yt.norm_sqr()),
                };
            }
            self.fft.forward(&mut e);
            for j in 0..2 {
                let mut g: Vec<Complex64> = segs[j].iter().zip(&e).map(|(xs, es)| xs.conj() * es).collect();
                self.fft.inverse(&mut g);
                let mu = self.step_size;
                for (t, gv) in self.taps[i][j].iter_mut().zip(&g) {
                    *t += gv * mu;
                }
            }
        }
        Ok(())
    }
}

/// Equalized payload symbols and the adapted filter.
#[derive(Clone, Debug)]
pub struct EqualizerOutput {
    pub symbols: [Vec<Complex64>; 2],
    pub state: EqualizerState,
}

/// `E|s|^4 / E|s|^2` of a constellation, the CMA radius.
pub fn cma_radius(c: &Constellation) -> f64 {
    let p = c.points();
    let m4: f64 = p.iter().map(|z| z.norm_sqr().powi(2)).sum();
    let m2: f64 = p.iter().map(|z| z.norm_sqr()).sum();
    m4 / m2
}

/// 2x2 equalization of one-sample-per-symbol inputs spanning the whole
/// frame. Data-aided LMS runs over the training block, CMA over the payload;
/// the equalized payload is returned.
pub fn mimo_equalize(rx: [&[Complex64]; 2], frame: &SymbolFrame, cfg: &EqualizerConfig) -> Result<EqualizerOutput> {
    cfg.validate()?;
    if frame.n_pol() != 2 {
        return Err(Error::InvalidInput("mimo_equalize needs a dual-polarization frame".into()));
    }
    let n = frame.spec.n_symbols();
    for x in rx {
        crate::error::ensure_same_len(n, x.len())?;
    }
    let r2 = cma_radius(&frame.constellation());
    let mut state = EqualizerState::identity(cfg)?;
    let hop = state.hop();
    let n_train = frame.n_training();
    let desired = [frame.symbols[0].as_slice(), frame.symbols[1].as_slice()];
    let mut scratch: [Vec<Complex64>; 2] = Default::default();
    if n_train > 0 {
        for _ in 0..cfg.training_passes.max(1) {
            let mut k0 = 0;
            while k0 < n_train {
                state.process_block(rx, k0, Some(desired), n_train, r2, &mut scratch)?;
                k0 += hop;
            }
        }
    }
    state.mode = EqualizerMode::Cma;
    state.step_size = cfg.cma_step;
    let mut out: [Vec<Complex64>; 2] = Default::default();
    let mut k0 = n_train;
    while k0 < n {
        state.process_block(rx, k0, None, n, r2, &mut out)?;
        k0 += hop;
    }
    Ok(EqualizerOutput { symbols: out, state })
}

/// Known symbols used to anchor carrier phase: `(index, value)` pairs in the
/// coordinates of the sequence being corrected.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseAnchors {
    pub indices: Vec<usize>,
    pub values: Vec<Complex64>,
}

impl PhaseAnchors {
    /// Payload pilots of polarization `pol`, indexed relative to the payload.
    pub fn payload_pilots(frame: &SymbolFrame, pol: usize) -> Self {
        let t = frame.n_training();
        let idx: Vec<usize> = frame.pilot_indices();
        Self {
            indices: idx.iter().map(|&i| i - t).collect(),
            values: idx.iter().map(|&i| frame.symbols[pol][i]).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn wrap(phi: f64) -> f64 {
    (phi + PI).rem_euclid(2.0 * PI) - PI
}

/// Centered sliding sums of `v` with half-width `half`.
fn sliding_sums(v: &[Complex64], half: usize) -> Vec<Complex64> {
    let mut prefix = Vec::with_capacity(v.len() + 1);
    prefix.push(ZERO);
    for z in v {
        let last = *prefix.last().unwrap();
        prefix.push(last + z);
    }
    (0..v.len())
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(v.len());
            prefix[hi] - prefix[lo]
        })
        .collect()
}

/// Phase seen on the anchors near every symbol: sum of `y * conj(p)` over
/// anchors within `half`, falling back to the nearest anchor.
fn anchor_phase(y: &[Complex64], anchors: &PhaseAnchors, half: usize) -> Vec<f64> {
    let n = y.len();
    let mut v = vec![ZERO; n];
    for (&i, &p) in anchors.indices.iter().zip(&anchors.values) {
        if i < n {
            v[i] = y[i] * p.conj();
        }
    }
    let sums = sliding_sums(&v, half);
    let idx = &anchors.indices;
    sums.iter()
        .enumerate()
        .map(|(k, s)| {
            if s.norm_sqr() > 0.0 {
                s.arg()
            } else {
                let pos = idx.partition_point(|&i| i < k);
                let cand = [pos.checked_sub(1), (pos < idx.len()).then_some(pos)];
                let near = cand.iter().flatten().copied().filter(|&p| idx[p] < n).min_by_key(|&p| idx[p].abs_diff(k));
                near.map_or(0.0, |p| v[idx[p]].arg())
            }
        })
        .collect()
}

/// Remove slowly varying common phase. QPSK uses a sliding fourth-power
/// (Viterbi-Viterbi) estimate whose `pi/2` ambiguity is resolved against the
/// anchors; QAM uses anchor-initialized decision-directed estimation.
/// `window` is the averaging length in symbols.
pub fn carrier_phase_recovery(
    symbols: &[Complex64],
    c: &Constellation,
    anchors: &PhaseAnchors,
    window: usize,
) -> Vec<Complex64> {
    let n = symbols.len();
    if n == 0 {
        return Vec::new();
    }
    let half = window.max(1) / 2;
    let phase: Vec<f64> = match c.modulation() {
        Modulation::Qpsk => {
            let v: Vec<Complex64> = symbols.iter().map(|z| z.powi(4)).collect();
            let sums = sliding_sums(&v, half);
            let mut vv: Vec<f64> = sums.iter().map(|s| (-s).arg() / 4.0).collect();
            for k in 1..n {
                let d = vv[k] - vv[k - 1];
                vv[k] -= FRAC_PI_2 * (d / FRAC_PI_2).round();
            }
            if anchors.is_empty() {
                vv
            } else {
                let ap = anchor_phase(symbols, anchors, half.max(1) * 2);
                vv.iter().zip(&ap).map(|(&p, &a)| p + FRAC_PI_2 * (wrap(a - p) / FRAC_PI_2).round()).collect()
            }
        }
        _ => {
            let coarse =
                if anchors.is_empty() { vec![0.0; n] } else { anchor_phase(symbols, anchors, half.max(1) * 2) };
            let mut known = vec![None; n];
            for (&i, &p) in anchors.indices.iter().zip(&anchors.values) {
                if i < n {
                    known[i] = Some(p);
                }
            }
            let v: Vec<Complex64> = symbols
                .iter()
                .zip(&coarse)
                .zip(&known)
                .map(|((&y, &ph), k)| {
                    let d = k.unwrap_or_else(|| c.slice(y * Complex64::from_polar(1.0, -ph)));
                    y * d.conj()
                })
                .collect();
            sliding_sums(&v, half).iter().map(|s| s.arg()).collect()
        }
    };
    symbols.iter().zip(&phase).map(|(y, &p)| y * Complex64::from_polar(1.0, -p)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BerCount {
    pub bit_errors: usize,
    pub bits_counted: usize,
    pub ber: f64,
}

impl BerCount {
    fn new(bit_errors: usize, bits_counted: usize) -> Self {
        Self { bit_errors, bits_counted, ber: bit_errors as f64 / bits_counted.max(1) as f64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    pub bit_errors: usize,
    pub bits_counted: usize,
    pub ber: f64,
    pub per_polarization: Vec<BerCount>,
}

/// Hard-decide payload symbols (payload-relative indexing, one sequence per
/// polarization) and count bit errors on non-pilot positions only.
pub fn count_ber(symbols: &[Vec<Complex64>], frame: &SymbolFrame) -> Result<BerReport> {
    if symbols.is_empty() || symbols.len() > frame.n_pol() {
        return Err(Error::InvalidInput("symbol streams do not match the frame".into()));
    }
    let c = frame.constellation();
    let k = c.bits_per_symbol();
    let t = frame.n_training();
    let data = frame.data_indices();
    if data.is_empty() {
        return Err(Error::InvalidInput("frame has no counted payload".into()));
    }
    let mut per = Vec::with_capacity(symbols.len());
    let mut bits = Vec::with_capacity(k);
    for (pol, seq) in symbols.iter().enumerate() {
        crate::error::ensure_same_len(frame.spec.n_payload_symbols, seq.len())?;
        let truth = &frame.bit_truth[pol];
        let mut errors = 0;
        for &i in &data {
            bits.clear();
            c.label_to_bits(c.decide(seq[i - t]), &mut bits);
            errors += bits.iter().zip(&truth[i * k..(i + 1) * k]).filter(|(a, b)| a != b).count();
        }
        per.push(BerCount::new(errors, data.len() * k));
    }
    let e = per.iter().map(|p| p.bit_errors).sum();
    let b = per.iter().map(|p| p.bits_counted).sum();
    Ok(BerReport { bit_errors: e, bits_counted: b, ber: e as f64 / b as f64, per_polarization: per })
}

/// Single-polarization back end: CD compensation, symbol-center
/// decimation, unit-power scaling and pilot-anchored phase recovery.
/// Returns payload symbols.
pub fn recover_single_pol(
    field: &ComplexWaveform,
    link_cd: &DispersionOperator,
    frame: &SymbolFrame,
    pol: usize,
    cpr_window: usize,
) -> Result<Vec<Complex64>> {
    let sps = frame.spec.samples_per_symbol;
    crate::error::ensure_same_len(frame.spec.n_samples(), field.len())?;
    let mut sym = compensate_cd(field, link_cd).decimate(sps, 0);
    let payload = sym.split_off(frame.n_training());
    let mut payload = payload;
    normalize_power(&mut payload);
    let anchors = PhaseAnchors::payload_pilots(frame, pol);
    Ok(carrier_phase_recovery(&payload, &frame.constellation(), &anchors, cpr_window))
}

/// Gaussian tail probability `Q(x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Uncoded Gray-mapped BER on an AWGN channel at the given OSNR (0.1 nm
/// reference). QPSK is exact, `Q(sqrt(SNR))`; square M-QAM uses the
/// nearest-neighbor form `4/k * (1 - 1/sqrt(M)) * Q(sqrt(3 SNR / (M - 1)))`.
/// SNR per symbol is `OSNR * 2 * B_ref / (n_pol * baud)`.
pub fn theory_ber(osnr_db: f64, modulation: Modulation, baud: f64, n_pol: usize) -> f64 {
    if osnr_db.is_infinite() && osnr_db > 0.0 {
        return 0.0;
    }
    let snr = snr_from_osnr(osnr_db, n_pol, baud, REFERENCE_BANDWIDTH);
    match modulation {
        Modulation::Qpsk => q_function(snr.sqrt()),
        m => {
            let k = m.bits_per_symbol() as f64;
            let order = 2f64.powf(k);
            (4.0 / k) * (1.0 - 1.0 / order.sqrt()) * q_function((3.0 * snr / (order - 1.0)).sqrt())
        }
    }
}

/// OSNR (dB) at which [`theory_ber`] equals `target`, by bisection.
pub fn required_osnr_db(target: f64, modulation: Modulation, baud: f64, n_pol: usize) -> Result<f64> {
    if !(target > 0.0 && target < 0.5) {
        return Err(Error::InvalidInput("target BER must lie in (0, 0.5)".into()));
    }
    let (mut lo, mut hi) = (-30.0, 80.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if theory_ber(mid, modulation, baud, n_pol) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// OSNR (dB) where a measured BER curve crosses `target`, by linear
/// interpolation of `log10(ber)` between the bracketing points. Points must
/// be sorted by OSNR; `None` when the curve never crosses.
pub fn interpolate_osnr_at(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let lt = target.log10();
    points.windows(2).find_map(|w| {
        let (o1, b1) = w[0];
        let (o2, b2) = w[1];
        let (l1, l2) = (b1.max(1e-12).log10(), b2.max(1e-12).log10());
        if (l1 - lt) * (l2 - lt) <= 0.0 && l1 != l2 {
            Some(o1 + (o2 - o1) * (lt - l1) / (l2 - l1))
        } else {
            None
        }
    })
}

/// One block of an overlap-save schedule: the input span
/// `start..start + block_len` and the output samples it contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpan {
    pub start: usize,
    pub keep_start: usize,
    pub keep_end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub block_len: usize,
    pub total: usize,
    pub blocks: Vec<BlockSpan>,
    /// The last block runs past the input and is zero-padded.
    pub padded: bool,
}

/// Overlapping blocks hopping by `block_len * (1 - save_fraction)`. Each
/// block contributes its center; the first and last blocks also cover the
/// leading and trailing edges.
pub fn plan_blocks(total: usize, block_len: usize, save_fraction: f64) -> Result<BlockPlan> {
    if block_len == 0 || !block_len.is_power_of_two() {
        return Err(Error::Config("block length must be a power of two".into()));
    }
    if !(0.0..1.0).contains(&save_fraction) {
        return Err(Error::Config("save fraction must lie in [0, 1)".into()));
    }
    if total == 0 {
        return Err(Error::InvalidInput("nothing to process".into()));
    }
    let hop = block_len - (block_len as f64 * save_fraction).round() as usize;
    if hop == 0 {
        return Err(Error::Config("save fraction leaves no hop".into()));
    }
    let edge = (block_len - hop) / 2;
    let n_blocks = if total <= block_len { 1 } else { 1 + (total - block_len).div_ceil(hop) };
    let blocks = (0..n_blocks)
        .map(|b| {
            let start = b * hop;
            BlockSpan {
                start,
                keep_start: if b == 0 { 0 } else { start + edge },
                keep_end: if b + 1 == n_blocks { total } else { start + edge + hop },
            }
        })
        .collect();
    Ok(BlockPlan { block_len, total, blocks, padded: (n_blocks - 1) * hop + block_len > total })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapSaveOutput<U> {
    /// Stitched output channels, each as long as the input.
    pub channels: Vec<Vec<U>>,
    pub n_blocks: usize,
    pub padded: bool,
}

/// Run `op` on every block of the inputs (in parallel) and stitch the kept
/// centers. `op` receives the block index and one `block_len` slice per
/// input channel (zero-padded past the end) and must return equally long
/// output channels.
pub fn overlap_save_run<T, U, F>(
    inputs: &[&[T]],
    block_len: usize,
    save_fraction: f64,
    op: F,
) -> Result<OverlapSaveOutput<U>>
where
    T: Copy + Default + Send + Sync,
    U: Copy + Send,
    F: Fn(usize, &[Vec<T>]) -> Result<Vec<Vec<U>>> + Sync,
{
    let total = inputs.first().map_or(0, |c| c.len());
    for c in inputs {
        crate::error::ensure_same_len(total, c.len())?;
    }
    let plan = plan_blocks(total, block_len, save_fraction)?;
    let results: Vec<Vec<Vec<U>>> = plan
        .blocks
        .par_iter()
        .enumerate()
        .map(|(b, span)| {
            let chunk: Vec<Vec<T>> = inputs
                .iter()
                .map(|c| (span.start..span.start + block_len).map(|i| c.get(i).copied().unwrap_or_default()).collect())
                .collect();
            let out = op(b, &chunk)?;
            if out.iter().any(|o| o.len() != block_len) {
                return Err(Error::LengthMismatch {
                    expected: block_len,
                    got: out.iter().map(|o| o.len()).find(|&l| l != block_len).unwrap_or(0),
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n_out = results.first().map_or(0, |r| r.len());
    let mut channels: Vec<Vec<U>> = (0..n_out).map(|_| Vec::with_capacity(total)).collect();
    for (span, res) in plan.blocks.iter().zip(&results) {
        if res.len() != n_out {
            return Err(Error::InvalidInput("block operator changed channel count".into()));
        }
        for (ch, r) in channels.iter_mut().zip(res) {
            ch.extend_from_slice(&r[span.keep_start - span.start..span.keep_end - span.start]);
        }
    }
    Ok(OverlapSaveOutput { channels, n_blocks: plan.blocks.len(), padded: plan.padded })
}

/// Summary of one simulated run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub osnr_db: Option<f64>,
    pub pilot_overhead: f64,
    pub dispersion_ps_nm: f64,
    pub ber: f64,
    pub mean_a_err_db: f64,
    pub iterations: usize,
    pub converged_fraction: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{random_unitary, rotation, DispersionOperator};
    use crate::waveform::{build_frame, shape_pulse, FrameSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn qpsk_frame(seed: u64, train: usize, payload: usize, n_pol: usize, ovh: f64) -> SymbolFrame {
        let spec = FrameSpec {
            n_training_symbols: train,
            n_payload_symbols: payload,
            pilot_overhead: ovh,
            ..FrameSpec::default()
        };
        build_frame(seed, &spec, &Constellation::new(Modulation::Qpsk), n_pol).unwrap()
    }

    fn payload(frame: &SymbolFrame, pol: usize) -> Vec<Complex64> {
        frame.symbols[pol][frame.n_training()..].to_vec()
    }

    #[test]
    fn cd_compensation_inverts_link() {
        let frame = qpsk_frame(3, 0, 512, 1, 0.2);
        let tx = shape_pulse(&frame.symbols[0], &frame.spec).unwrap();
        let link = DispersionOperator::new(1029.0);
        assert_eq!(compensate_cd(&tx, &DispersionOperator::new(0.0)), tx);
        let back = compensate_cd(&apply_dispersion(&tx, &link), &link);
        assert!(crate::channel::relative_rms(&back.samples, &tx.samples) < 1e-9);
    }

    #[test]
    fn long_link_compensation_restores_symbol_instants() {
        let frame = qpsk_frame(4, 0, 4096, 1, 0.0);
        let tx = shape_pulse(&frame.symbols[0], &frame.spec).unwrap();
        let link = DispersionOperator::new(8921.0);
        let rx = compensate_cd(&apply_dispersion(&tx, &link), &link);
        let sym = rx.decimate(2, 0);
        let err: f64 = sym.iter().zip(&frame.symbols[0]).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        let evm = (err / mean_power(&frame.symbols[0]) / sym.len() as f64).sqrt();
        assert!(evm < 0.01, "evm {evm}");
    }

    #[test]
    fn identity_channel_keeps_identity_taps() {
        let frame = qpsk_frame(5, 1024, 1024, 2, 0.2);
        let rx = [frame.symbols[0].as_slice(), frame.symbols[1].as_slice()];
        let out = mimo_equalize(rx, &frame, &EqualizerConfig::default()).unwrap();
        let c = out.state.n_taps() / 2;
        for i in 0..2 {
            for j in 0..2 {
                for (m, t) in out.state.taps[i][j].iter().enumerate() {
                    let want = if i == j && m == c { 1.0 } else { 0.0 };
                    assert!((t - Complex64::new(want, 0.0)).norm() < 1e-6);
                }
            }
            for (y, s) in out.symbols[i].iter().zip(&payload(&frame, i)) {
                assert!((y - s).norm() < 1e-6);
            }
        }
    }

    fn mix(frame: &SymbolFrame, m: &crate::channel::Jones, noise: f64, seed: u64) -> [Vec<Complex64>; 2] {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut out: [Vec<Complex64>; 2] = Default::default();
        for k in 0..frame.spec.n_symbols() {
            let (x, y) = crate::channel::jones_apply(m, frame.symbols[0][k], frame.symbols[1][k]);
            for (o, v) in out.iter_mut().zip([x, y]) {
                let n = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * noise;
                o.push(v + n);
            }
        }
        out
    }

    #[test]
    fn equalizer_learns_polarization_swap() {
        let frame = qpsk_frame(6, 4096, 2048, 2, 0.2);
        let rx = mix(&frame, &rotation(std::f64::consts::FRAC_PI_2), 0.0, 1);
        let cfg = EqualizerConfig { training_passes: 3, ..EqualizerConfig::default() };
        let out = mimo_equalize([&rx[0], &rx[1]], &frame, &cfg).unwrap();
        let ber = count_ber(&out.symbols, &frame).unwrap();
        assert_eq!(ber.bit_errors, 0);
    }

    #[test]
    fn equalizer_handles_random_unitary_with_noise() {
        let frame = qpsk_frame(7, 4096, 4096, 2, 0.2);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let m = random_unitary(&mut rng);
        let rx = mix(&frame, &m, 0.1, 2);
        let cfg = EqualizerConfig { training_passes: 3, ..EqualizerConfig::default() };
        let out = mimo_equalize([&rx[0], &rx[1]], &frame, &cfg).unwrap();
        let ber = count_ber(&out.symbols, &frame).unwrap();
        assert!(ber.ber < 1e-3, "ber {}", ber.ber);
    }

    #[test]
    fn divergence_guard_trips() {
        let frame = qpsk_frame(8, 512, 512, 2, 0.2);
        let rx = [frame.symbols[0].clone(), frame.symbols[1].clone()];
        let cfg = EqualizerConfig { lms_step: 5.0, ..EqualizerConfig::default() };
        let r = mimo_equalize([&rx[0], &rx[1]], &frame, &cfg);
        let scaled: Vec<Vec<Complex64>> = rx.iter().map(|v| v.iter().map(|z| z * 30.0).collect()).collect();
        let r2 = mimo_equalize([&scaled[0], &scaled[1]], &frame, &cfg);
        assert!(matches!(r, Err(Error::Diverged(_))) || matches!(r2, Err(Error::Diverged(_))));
    }

    #[test]
    fn constant_rotation_is_removed() {
        let frame = qpsk_frame(10, 0, 1024, 1, 0.2);
        let p = payload(&frame, 0);
        let rot: Vec<Complex64> = p.iter().map(|z| z * Complex64::from_polar(1.0, PI / 7.0)).collect();
        let out = carrier_phase_recovery(&rot, &frame.constellation(), &PhaseAnchors::payload_pilots(&frame, 0), 64);
        for (a, b) in out.iter().zip(&p) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_drift_is_identity() {
        let frame = qpsk_frame(11, 0, 512, 1, 0.1);
        let p = payload(&frame, 0);
        let out = carrier_phase_recovery(&p, &frame.constellation(), &PhaseAnchors::payload_pilots(&frame, 0), 64);
        for (a, b) in out.iter().zip(&p) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn slow_drift_is_tracked() {
        let frame = qpsk_frame(12, 0, 8192, 1, 0.2);
        let p = payload(&frame, 0);
        // Peak slope 1 mrad/symbol.
        let period = 2000.0;
        let amp = 1e-3 * period / (2.0 * PI);
        let phase = |k: usize| amp * (2.0 * PI * k as f64 / period).sin() + 0.3;
        let rot: Vec<Complex64> = p.iter().enumerate().map(|(k, z)| z * Complex64::from_polar(1.0, phase(k))).collect();
        let out = carrier_phase_recovery(&rot, &frame.constellation(), &PhaseAnchors::payload_pilots(&frame, 0), 64);
        let var = out.iter().zip(&p).map(|(a, b)| (a * b.conj()).arg().powi(2)).sum::<f64>() / p.len() as f64;
        assert!(var < 1e-3, "var {var}");
    }

    #[test]
    fn pilot_anchor_prevents_inversion() {
        let frame = qpsk_frame(13, 0, 2048, 1, 0.2);
        let neg: Vec<Complex64> = payload(&frame, 0).iter().map(|z| -z).collect();
        let out = carrier_phase_recovery(&neg, &frame.constellation(), &PhaseAnchors::payload_pilots(&frame, 0), 64);
        let ber = count_ber(&[out], &frame).unwrap();
        assert_eq!(ber.bit_errors, 0);
        let raw = count_ber(&[neg], &frame).unwrap();
        assert!(raw.ber > 0.5);
    }

    #[test]
    fn qam_decision_directed_removes_rotation() {
        let spec = FrameSpec { n_payload_symbols: 2048, ..FrameSpec::default() };
        let frame = build_frame(14, &spec, &Constellation::new(Modulation::Qam16), 1).unwrap();
        let p = payload(&frame, 0);
        let rot: Vec<Complex64> = p.iter().map(|z| z * Complex64::from_polar(1.0, 0.4)).collect();
        let out = carrier_phase_recovery(&rot, &frame.constellation(), &PhaseAnchors::payload_pilots(&frame, 0), 64);
        assert_eq!(count_ber(&[out], &frame).unwrap().bit_errors, 0);
    }

    #[test]
    fn ber_counts_only_data_positions() {
        let frame = qpsk_frame(15, 64, 1000, 2, 0.2);
        let syms: Vec<Vec<Complex64>> = (0..2).map(|p| payload(&frame, p)).collect();
        let r = count_ber(&syms, &frame).unwrap();
        assert_eq!(r.bit_errors, 0);
        assert_eq!(r.ber, 0.0);
        let pilots = frame.pilot_indices().len();
        assert_eq!(r.bits_counted, 2 * 2 * (1000 - pilots));
        assert_eq!(r.per_polarization.len(), 2);
    }

    #[test]
    fn injected_symbol_errors_give_half_rate() {
        let frame = qpsk_frame(16, 0, 100_000, 1, 0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let c = frame.constellation();
        let mut syms = payload(&frame, 0);
        for z in syms.iter_mut() {
            if rng.random::<f64>() < 0.01 {
                // Move to an adjacent point: flip the sign of one axis.
                *z = if rng.random::<bool>() { Complex64::new(-z.re, z.im) } else { z.conj() };
            }
        }
        let _ = c;
        let r = count_ber(&[syms], &frame).unwrap();
        let sigma = (0.005 * 0.995 / r.bits_counted as f64).sqrt();
        assert!((r.ber - 0.005).abs() < 4.0 * sigma, "ber {}", r.ber);
    }

    #[test]
    fn theory_anchor_and_monotonicity() {
        let o = required_osnr_db(2e-2, Modulation::Qpsk, 30e9, 1).unwrap();
        assert!((o - 7.04).abs() < 0.05, "{o}");
        assert!(theory_ber(f64::INFINITY, Modulation::Qpsk, 30e9, 1) == 0.0);
        assert!(theory_ber(60.0, Modulation::Qpsk, 30e9, 1) < 1e-100);
        let q16 = required_osnr_db(2e-2, Modulation::Qam16, 30e9, 1).unwrap();
        let q64 = required_osnr_db(2e-2, Modulation::Qam64, 30e9, 1).unwrap();
        assert!(q16 > o && q64 > q16);
        // Two polarizations need 3 dB more at equal per-pol rate.
        let dual = required_osnr_db(2e-2, Modulation::Qpsk, 30e9, 2).unwrap();
        assert!((dual - o - 10.0 * 2f64.log10()).abs() < 1e-6);
    }

    #[test]
    fn crossing_interpolation() {
        let pts = [(10.0, 1e-1), (12.0, 1e-2), (14.0, 1e-3)];
        let x = interpolate_osnr_at(&pts, 1e-2).unwrap();
        assert!((x - 12.0).abs() < 1e-12);
        let y = interpolate_osnr_at(&pts, 10f64.powf(-1.5)).unwrap();
        assert!((y - 11.0).abs() < 1e-12);
        assert!(interpolate_osnr_at(&pts, 1e-5).is_none());
    }

    #[test]
    fn block_plan_covers_input_once() {
        let p = plan_blocks(5000, 1024, 0.5).unwrap();
        assert!(p.padded);
        assert_eq!(p.blocks[0].keep_start, 0);
        assert_eq!(p.blocks.last().unwrap().keep_end, 5000);
        for w in p.blocks.windows(2) {
            assert_eq!(w[0].keep_end, w[1].keep_start);
        }
        let exact = plan_blocks(1024 + 512 * 3, 1024, 0.5).unwrap();
        assert!(!exact.padded);
        assert!(plan_blocks(100, 1000, 0.5).is_err());
        assert!(plan_blocks(100, 64, 1.0).is_err());
    }

    #[test]
    fn overlap_save_pass_through_is_lossless() {
        let x: Vec<Complex64> = (0..7000).map(|k| Complex64::new((k as f64).sin(), k as f64)).collect();
        let y: Vec<Complex64> = x.iter().map(|z| z * 2.0).collect();
        let out = overlap_save_run(&[&x, &y], 1024, 0.5, |_, c| Ok(c.to_vec())).unwrap();
        assert_eq!(out.channels[0], x);
        assert_eq!(out.channels[1], y);
        assert!(out.padded);
    }

    proptest! {
        #[test]
        fn overlap_save_identity_any_length(n in 1usize..5000, log in 3u32..11) {
            let x: Vec<f64> = (0..n).map(|k| k as f64).collect();
            let out = overlap_save_run(&[&x], 1 << log, 0.5, |_, c| Ok(c.to_vec())).unwrap();
            prop_assert_eq!(&out.channels[0], &x);
        }

        #[test]
        fn constant_phase_removed_for_any_angle(theta in -3.0f64..3.0, seed in 0u64..50) {
            let frame = qpsk_frame(seed, 0, 256, 1, 0.2);
            let p = payload(&frame, 0);
            let rot: Vec<Complex64> = p.iter().map(|z| z * Complex64::from_polar(1.0, theta)).collect();
            let out = carrier_phase_recovery(&rot, &frame.constellation(), &PhaseAnchors::payload_pilots(&frame, 0), 64);
            for (a, b) in out.iter().zip(&p) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }
    }
}
