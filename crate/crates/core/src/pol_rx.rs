//! Polarization-diversity front end. Four intensity traces (undispersed and
//! dispersed, per polarization) are retrieved with pilots predicted through
//! the current estimate of the fiber's 2x2 response, and the response is
//! re-estimated from the training block until the two agree.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{jones_pdl_db, random_unitary, DispersionOperator, Jones, SPEED_OF_LIGHT};
use crate::dsp_backend::{
    carrier_phase_recovery, compensate_cd, count_ber, mimo_equalize, overlap_save_run, BerReport, EqualizerConfig,
    PhaseAnchors,
};
use crate::error::{ensure_same_len, Error, Result};
use crate::fft::{bin_frequencies, fft, ifft};
use crate::phase_retrieval::{
    run_retrieval_from, PilotConstraint, PilotTargets, RetrievalConfig, RetrievalProblem, RetrievalReport,
    RetrievalState,
};
use crate::waveform::{ComplexWaveform, IntensityTrace, SymbolFrame};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Filters of a 2x2 butterfly, `[out][in]`.
pub type Butterfly = [[Vec<Complex64>; 2]; 2];

/// Undispersed (`a`) and dispersed (`b`) intensities of both polarizations.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadIntensityCapture {
    pub a_x: IntensityTrace,
    pub b_x: IntensityTrace,
    pub a_y: IntensityTrace,
    pub b_y: IntensityTrace,
    pub retrieval_dispersion: [DispersionOperator; 2],
}

impl QuadIntensityCapture {
    pub fn new(
        a_x: IntensityTrace,
        b_x: IntensityTrace,
        a_y: IntensityTrace,
        b_y: IntensityTrace,
        retrieval_dispersion: [DispersionOperator; 2],
    ) -> Result<Self> {
        let n = a_x.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty capture".into()));
        }
        for t in [&b_x, &a_y, &b_y] {
            ensure_same_len(n, t.len())?;
        }
        for t in [&a_x, &b_x, &a_y, &b_y] {
            if t.samples.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput("intensity samples must be finite and nonnegative".into()));
            }
        }
        Ok(Self { a_x, b_x, a_y, b_y, retrieval_dispersion })
    }

    /// Photodetect both received polarizations before and after the
    /// dispersive elements.
    pub fn detect(fields: [&ComplexWaveform; 2], retrieval_dispersion: [DispersionOperator; 2]) -> Result<Self> {
        use crate::channel::{apply_dispersion, photodetect};
        let [x, y] = fields;
        Self::new(
            photodetect(x),
            photodetect(&apply_dispersion(x, &retrieval_dispersion[0])),
            photodetect(y),
            photodetect(&apply_dispersion(y, &retrieval_dispersion[1])),
            retrieval_dispersion,
        )
    }

    pub fn len(&self) -> usize {
        self.a_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_x.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.a_x.sample_rate
    }

    pub fn a(&self, pol: usize) -> &IntensityTrace {
        if pol == 0 {
            &self.a_x
        } else {
            &self.a_y
        }
    }

    pub fn b(&self, pol: usize) -> &IntensityTrace {
        if pol == 0 {
            &self.b_x
        } else {
            &self.b_y
        }
    }

    /// Field gain from unit-power symbols to the intensity units of the
    /// capture, assuming a lossless channel.
    pub fn symbol_gain(&self, rolloff: f64) -> f64 {
        let p = 0.5 * (self.a_x.mean() + self.a_y.mean());
        (p / (1.0 - rolloff / 4.0)).sqrt()
    }

    /// Samples `start..start + len` of every trace.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() || len == 0 {
            return Err(Error::InvalidInput("capture slice out of range".into()));
        }
        let cut = |t: &IntensityTrace| IntensityTrace {
            samples: t.samples[start..start + len].to_vec(),
            sample_rate: t.sample_rate,
        };
        Ok(Self {
            a_x: cut(&self.a_x),
            b_x: cut(&self.b_x),
            a_y: cut(&self.a_y),
            b_y: cut(&self.b_y),
            retrieval_dispersion: self.retrieval_dispersion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Symbol-spaced taps per filter of `h_pm`.
    pub n_taps: usize,
    /// Ridge weight relative to the mean diagonal of the normal matrix.
    pub ridge: f64,
    /// Largest timing offset (symbols) searched during alignment.
    pub max_lag: usize,
    /// Training symbols ignored at each end of the block.
    pub edge_guard: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { n_taps: 64, ridge: 1e-10, max_lag: 16, edge_guard: 0 }
    }
}

/// Estimated fiber response at one sample per symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrixEstimate {
    /// Full response including the transmission-fiber dispersion.
    pub h: Butterfly,
    /// Polarization mixing after dispersion removal; center tap `n_taps/2`.
    pub h_pm: Butterfly,
    /// DFT of `h_pm` (length `n_taps`).
    pub h_pm_freq: Butterfly,
    pub pdl_db: f64,
    pub iteration: usize,
    /// Timing offset found by alignment (symbols).
    pub lag: isize,
    pub baud_rate: f64,
    pub link_cd: DispersionOperator,
}

impl ChannelMatrixEstimate {
    /// Frequency-flat estimate from a single Jones matrix.
    pub fn from_jones(m: &Jones, n_taps: usize, baud_rate: f64, link_cd: DispersionOperator) -> Self {
        let mut h_pm: Butterfly = Default::default();
        for i in 0..2 {
            for j in 0..2 {
                let mut t = vec![ZERO; n_taps];
                t[n_taps / 2] = m[i][j];
                h_pm[i][j] = t;
            }
        }
        Self::from_h_pm(h_pm, 0, 0, baud_rate, link_cd)
    }

    /// Rotate each output row so its largest tap is real and positive.
    /// Intensity measurements cannot see a common phase on one output
    /// polarization, so only this gauge of `h_pm` is observable.
    pub fn fix_row_phases(&mut self) {
        for i in 0..2 {
            let peak = self.h_pm[i]
                .iter()
                .flatten()
                .copied()
                .max_by(|a, b| a.norm_sqr().total_cmp(&b.norm_sqr()))
                .unwrap_or(ZERO);
            if peak.norm() == 0.0 {
                continue;
            }
            let rot = peak.conj() / peak.norm();
            for set in [&mut self.h_pm, &mut self.h_pm_freq, &mut self.h] {
                for f in set[i].iter_mut() {
                    f.iter_mut().for_each(|z| *z *= rot);
                }
            }
        }
    }

    fn from_h_pm(h_pm: Butterfly, iteration: usize, lag: isize, baud_rate: f64, link_cd: DispersionOperator) -> Self {
        let mut h_pm_freq: Butterfly = Default::default();
        for i in 0..2 {
            for j in 0..2 {
                h_pm_freq[i][j] = fft(&h_pm[i][j]);
            }
        }
        let h = full_response(&h_pm, baud_rate, &link_cd);
        let mut est = Self { h, h_pm, h_pm_freq, pdl_db: 0.0, iteration, lag, baud_rate, link_cd };
        est.pdl_db = compute_pdl(&est);
        est
    }

    pub fn n_taps(&self) -> usize {
        self.h_pm[0][0].len()
    }

    /// Jones matrix of `h_pm` at DFT bin `k`.
    pub fn jones_at_bin(&self, k: usize) -> Jones {
        let f = &self.h_pm_freq;
        [[f[0][0][k], f[0][1][k]], [f[1][0][k], f[1][1][k]]]
    }
}

/// Symbol-rate span of the dispersion impulse response, in symbols.
fn cd_memory_symbols(link: &DispersionOperator, baud: f64) -> usize {
    let spread = link.beta2l().abs() * 2.0 * std::f64::consts::PI * baud;
    (spread * baud).ceil() as usize + 1
}

/// `h = h_cd * h_pm` on a symbol-rate grid long enough to hold both.
fn full_response(h_pm: &Butterfly, baud: f64, link: &DispersionOperator) -> Butterfly {
    let l = h_pm[0][0].len();
    let n = (l + 2 * cd_memory_symbols(link, baud)).next_power_of_two();
    let cd: Vec<Complex64> =
        bin_frequencies(n, baud).iter().map(|&f| link.response(2.0 * std::f64::consts::PI * f)).collect();
    let mut h: Butterfly = Default::default();
    for i in 0..2 {
        for j in 0..2 {
            let mut buf = vec![ZERO; n];
            buf[..l].copy_from_slice(&h_pm[i][j]);
            let mut spec = fft(&buf);
            spec.iter_mut().zip(&cd).for_each(|(v, c)| *v *= c);
            h[i][j] = ifft(&spec);
        }
    }
    h
}

/// Band-averaged `20 log10(sigma_max / sigma_min)` of `H_pm` over its DFT
/// bins, which span the symbol-rate band. Infinite when any bin is singular.
pub fn compute_pdl(est: &ChannelMatrixEstimate) -> f64 {
    let n = est.n_taps();
    let total: f64 = (0..n).map(|k| jones_pdl_db(&est.jones_at_bin(k))).sum();
    total / n as f64
}

/// Solve `(G + lambda I) x = rhs` for Hermitian positive semidefinite `G`
/// (row-major `n x n`) by Cholesky factorization.
fn solve_hermitian(
    mut g: Vec<Complex64>,
    n: usize,
    lambda: f64,
    rhs: &[Vec<Complex64>],
) -> Result<Vec<Vec<Complex64>>> {
    let mean_diag = (0..n).map(|i| g[i * n + i].re).sum::<f64>() / n as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::RankDeficient("training matrix is zero".into()));
    }
    for i in 0..n {
        g[i * n + i] += lambda;
    }
    // Lower-triangular factor in place.
    for j in 0..n {
        let mut d = g[j * n + j].re;
        for k in 0..j {
            d -= g[j * n + k].norm_sqr();
        }
        if !(d > 1e-9 * mean_diag) {
            return Err(Error::RankDeficient(format!(
                "training matrix is rank deficient at unknown {j} of {n} (pivot {d:.3e}, mean diagonal {mean_diag:.3e})"
            )));
        }
        let d = d.sqrt();
        g[j * n + j] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = g[i * n + j];
            for k in 0..j {
                s -= g[i * n + k] * g[j * n + k].conj();
            }
            g[i * n + j] = s / d;
        }
    }
    Ok(rhs
        .iter()
        .map(|b| {
            let mut y = b.clone();
            for i in 0..n {
                let mut s = y[i];
                for k in 0..i {
                    s -= g[i * n + k] * y[k];
                }
                y[i] = s / g[i * n + i].re;
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in i + 1..n {
                    s -= g[k * n + i].conj() * y[k];
                }
                y[i] = s / g[i * n + i].re;
            }
            y
        })
        .collect())
}

/// Offset `lag` maximizing the summed cross-correlation energy between
/// received and sent sequences, `rx[k + lag] ~ sent[k]`.
fn align(rx: [&[Complex64]; 2], sent: [&[Complex64]; 2], max_lag: usize) -> isize {
    let n = sent[0].len().min(rx[0].len());
    let mut best = (f64::NEG_INFINITY, 0isize);
    for lag in -(max_lag as isize)..=max_lag as isize {
        let mut energy = 0.0;
        for r in rx {
            for s in sent {
                let mut acc = ZERO;
                for (k, sv) in s.iter().enumerate().take(n) {
                    let idx = k as isize + lag;
                    if idx >= 0 && (idx as usize) < r.len() {
                        acc += r[idx as usize] * sv.conj();
                    }
                }
                energy += acc.norm_sqr();
            }
        }
        if energy > best.0 {
            best = (energy, lag);
        }
    }
    best.1
}

/// Least-squares 2x2 FIR from symbol-rate sequences. Model:
/// `rx_i[k + lag] = sum_j sum_m h_ij[m] sent_j[k + c - m]`, `c = n_taps/2`.
fn fit_butterfly(
    rx: [&[Complex64]; 2],
    sent: [&[Complex64]; 2],
    lag: isize,
    cfg: &EstimatorConfig,
) -> Result<Butterfly> {
    let l = cfg.n_taps;
    let c = l / 2;
    let n_sent = sent[0].len();
    let nu = 2 * l;
    let mut g = vec![ZERO; nu * nu];
    let mut rhs = vec![vec![ZERO; nu]; 2];
    let mut row = vec![ZERO; nu];
    let mut rows = 0usize;
    for k in 0..n_sent {
        if k + c + 1 < l || k + c >= n_sent || k < cfg.edge_guard || k + cfg.edge_guard >= n_sent {
            continue;
        }
        let idx = k as isize + lag;
        if idx < 0 || idx as usize >= rx[0].len() {
            continue;
        }
        for j in 0..2 {
            for m in 0..l {
                row[j * l + m] = sent[j][k + c - m];
            }
        }
        for p in 0..nu {
            let rp = row[p].conj();
            for q in p..nu {
                g[p * nu + q] += rp * row[q];
            }
            for (i, r) in rx.iter().enumerate() {
                rhs[i][p] += rp * r[idx as usize];
            }
        }
        rows += 1;
    }
    if rows < nu {
        return Err(Error::RankDeficient(format!("{rows} usable training symbols for {nu} unknowns")));
    }
    for p in 0..nu {
        for q in 0..p {
            g[p * nu + q] = g[q * nu + p].conj();
        }
    }
    let mean_diag = (0..nu).map(|i| g[i * nu + i].re).sum::<f64>() / nu as f64;
    let sol = solve_hermitian(g, nu, cfg.ridge * mean_diag, &rhs)?;
    let mut h: Butterfly = Default::default();
    for i in 0..2 {
        for j in 0..2 {
            h[i][j] = sol[i][j * l..(j + 1) * l].to_vec();
        }
    }
    Ok(h)
}

/// Estimate the fiber response from received training fields (sample rate,
/// frame-aligned) and the sent training symbols. Transmission dispersion is
/// removed from the received fields before fitting; the full response `h`
/// re-applies it to the fitted mixing filters.
pub fn estimate_h(
    received: [&ComplexWaveform; 2],
    frame: &SymbolFrame,
    link_cd: &DispersionOperator,
    cfg: &EstimatorConfig,
) -> Result<ChannelMatrixEstimate> {
    if frame.n_pol() != 2 {
        return Err(Error::InvalidInput("channel estimation needs a dual-polarization frame".into()));
    }
    let n_train = frame.n_training();
    if n_train == 0 {
        return Err(Error::InvalidInput("frame has no training block".into()));
    }
    if cfg.n_taps == 0 {
        return Err(Error::Config("n_taps must be positive".into()));
    }
    ensure_same_len(received[0].len(), received[1].len())?;
    let sps = frame.spec.samples_per_symbol;
    let rx: Vec<Vec<Complex64>> = received.iter().map(|w| compensate_cd(w, link_cd).decimate(sps, 0)).collect();
    let sent = [&frame.symbols[0][..n_train], &frame.symbols[1][..n_train]];
    let rxs = [rx[0].as_slice(), rx[1].as_slice()];
    let lag = align(rxs, sent, cfg.max_lag);
    let h_pm = fit_butterfly(rxs, sent, lag, cfg)?;
    Ok(ChannelMatrixEstimate::from_h_pm(h_pm, 1, lag, frame.spec.baud_rate, *link_cd))
}

/// Forward-propagate known symbol streams through `h_pm`:
/// `out_i[k] = sum_j sum_m h_pm_ij[m] p_j[k + c - m]`. Unknown positions of
/// `p` are zero.
pub fn propagate_pilots(est: &ChannelMatrixEstimate, p: [&[Complex64]; 2]) -> Result<[Vec<Complex64>; 2]> {
    ensure_same_len(p[0].len(), p[1].len())?;
    let n = p[0].len();
    let l = est.n_taps();
    let c = l / 2;
    let mut out: [Vec<Complex64>; 2] = [vec![ZERO; n], vec![ZERO; n]];
    for (i, o) in out.iter_mut().enumerate() {
        for (j, pj) in p.iter().enumerate() {
            let taps = &est.h_pm[i][j];
            for (k, ok) in o.iter_mut().enumerate() {
                let mut acc = ZERO;
                for (m, t) in taps.iter().enumerate() {
                    let idx = k + c;
                    if idx >= m && idx - m < n {
                        acc += t * pj[idx - m];
                    }
                }
                *ok += acc;
            }
        }
    }
    Ok(out)
}

/// Known-symbol streams of a frame with zeros elsewhere: the training block
/// at every `training_spacing`-th symbol and the payload pilots.
pub fn known_streams(frame: &SymbolFrame, training_spacing: usize) -> ([Vec<Complex64>; 2], Vec<usize>) {
    let n = frame.spec.n_symbols();
    let mut positions: Vec<usize> = (0..frame.n_training()).step_by(training_spacing.max(1)).collect();
    positions.extend(frame.pilot_indices());
    let mut streams: [Vec<Complex64>; 2] = [vec![ZERO; n], vec![ZERO; n]];
    for (pol, s) in streams.iter_mut().enumerate() {
        for &k in &positions {
            s[k] = frame.symbols[pol][k];
        }
    }
    (streams, positions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointLoopConfig {
    pub n_iters: usize,
    /// Seed of the initial unitary guess.
    pub seed: u64,
    pub estimator: EstimatorConfig,
    /// Spacing of the training symbols used as retrieval constraints.
    pub training_spacing: usize,
    /// Retrieval iterations of every pass after the first, which starts
    /// from the previous pass's field.
    pub refine_iterations: usize,
    /// Starting matrix; a random unitary drawn from `seed` when `None`.
    pub initial: Option<Jones>,
}

impl Default for JointLoopConfig {
    fn default() -> Self {
        Self {
            n_iters: 6,
            seed: 0,
            estimator: EstimatorConfig::default(),
            training_spacing: 2,
            refine_iterations: 2000,
            initial: None,
        }
    }
}

/// Outcome of the joint retrieval / estimation loop.
#[derive(Clone, Debug)]
pub struct JointEstimation {
    pub estimate: ChannelMatrixEstimate,
    /// Estimate after every pass.
    pub history: Vec<ChannelMatrixEstimate>,
    /// Retrieval diagnostics per pass and polarization.
    pub reports: Vec<[RetrievalReport; 2]>,
    /// Retrieved training fields of the last pass (received domain).
    pub fields: [ComplexWaveform; 2],
}

/// Pilot targets in the units of a problem normalized by `scale`.
fn targets(values: &[Complex64], positions: &[usize], sps: usize, gain: f64, limit: usize) -> PilotTargets {
    let keep: Vec<usize> = positions.iter().copied().filter(|&k| k * sps < limit).collect();
    PilotTargets {
        samples_per_symbol: sps,
        indices: keep.iter().map(|&k| k * sps).collect(),
        values: keep.iter().map(|&k| values[k] * gain).collect(),
    }
}

/// Iterate retrieval of the training block with pilots predicted through
/// the current estimate, and re-estimation from the retrieved fields.
/// Starts from a random unitary (zero PDL). Retrieval non-convergence is
/// recorded in the reports and does not stop the loop.
pub fn joint_estimation_loop(
    cap: &QuadIntensityCapture,
    frame: &SymbolFrame,
    cfg: &RetrievalConfig,
    loop_cfg: &JointLoopConfig,
) -> Result<JointEstimation> {
    if loop_cfg.n_iters == 0 {
        return Err(Error::Config("n_iters must be at least 1".into()));
    }
    let sps = frame.spec.samples_per_symbol;
    let n_train = frame.n_training();
    if n_train == 0 {
        return Err(Error::InvalidInput("frame has no training block".into()));
    }
    let len = n_train * sps;
    // A training block cut from a longer capture is not periodic, so
    // circular dispersion removal corrupts its ends.
    let guard = if cap.len() == len { 0 } else { cd_memory_symbols(&cfg.link_cd, frame.spec.baud_rate) };
    let cap = if cap.len() == len { cap.clone() } else { cap.slice(0, len)? };
    let mut est_cfg = loop_cfg.estimator.clone();
    est_cfg.edge_guard = est_cfg.edge_guard.max(guard);
    let fs = cap.sample_rate();
    let mut rng = ChaCha20Rng::seed_from_u64(loop_cfg.seed);
    let mut u = loop_cfg.initial.unwrap_or_else(|| random_unitary(&mut rng));
    let g0 = cap.symbol_gain(frame.spec.rolloff);
    u.iter_mut().flatten().for_each(|z| *z *= g0);
    let mut est = ChannelMatrixEstimate::from_jones(&u, loop_cfg.estimator.n_taps, frame.spec.baud_rate, cfg.link_cd);
    let (streams, positions) = known_streams(frame, loop_cfg.training_spacing);
    let train_pos: Vec<usize> = positions.into_iter().filter(|&k| k >= guard && k + guard < n_train).collect();
    let streams = [&streams[0][..n_train], &streams[1][..n_train]];
    let scale = 1.0 / cap.a_x.max().max(cap.a_y.max()).max(f64::MIN_POSITIVE);
    let gain = scale.sqrt();
    let mut states: [Option<RetrievalState>; 2] = [None, None];
    let mut history = Vec::with_capacity(loop_cfg.n_iters);
    let mut reports = Vec::with_capacity(loop_cfg.n_iters);
    let mut fields: Vec<ComplexWaveform> = Vec::new();
    for pass in 0..loop_cfg.n_iters {
        let predicted = propagate_pilots(&est, streams)?;
        let mut pass_reports: Vec<RetrievalReport> = Vec::with_capacity(2);
        fields.clear();
        for pol in 0..2 {
            let mut pcfg = cfg.clone();
            pcfg.retrieval_dispersion = cap.retrieval_dispersion[pol];
            pcfg.seed = cfg.seed.wrapping_add(pol as u64).wrapping_add(1000 * pass as u64);
            let warm = states[pol].take();
            if warm.is_some() {
                pcfg.max_iterations = Some(loop_cfg.refine_iterations);
                pcfg.max_escapes = loop_cfg.refine_iterations / pcfg.reset_period.max(1);
            }
            let pilots = targets(&predicted[pol], &train_pos, sps, gain, len);
            let mut problem = RetrievalProblem::with_scale(cap.a(pol), cap.b(pol), scale, &pcfg, pilots)?;
            let mut prng = ChaCha20Rng::seed_from_u64(pcfg.seed);
            let start = match warm {
                Some(s) => RetrievalState::from_field(s.estimate),
                None => problem.initial_state(&mut prng)?,
            };
            let (state, report) = run_retrieval_from(&mut problem, start, &mut prng, None)?;
            let g = 1.0 / gain;
            fields.push(ComplexWaveform::new(
                state.estimate.iter().map(|z| z * g).collect(),
                fs,
                frame.spec.center_wavelength,
            )?);
            states[pol] = Some(state);
            pass_reports.push(report);
        }
        let mut next = estimate_h([&fields[0], &fields[1]], frame, &cfg.link_cd, &est_cfg)?;
        next.fix_row_phases();
        next.iteration = pass + 1;
        history.push(next.clone());
        est = next;
        let [r0, r1]: [RetrievalReport; 2] = pass_reports.try_into().expect("two polarizations");
        reports.push([r0, r1]);
    }
    let [fx, fy]: [ComplexWaveform; 2] = fields.try_into().expect("two polarizations");
    Ok(JointEstimation { estimate: est, history, reports, fields: [fx, fy] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockRetrievalConfig {
    /// Samples per overlap-save block.
    pub block_len: usize,
    pub save_fraction: f64,
    /// Spacing of training symbols used as constraints.
    pub training_spacing: usize,
    /// Treat the capture as one period of a repeating frame and wrap half a
    /// block around each end, so the frame edges are retrieved like the
    /// interior.
    pub periodic: bool,
}

impl Default for BlockRetrievalConfig {
    fn default() -> Self {
        Self { block_len: 1 << 10, save_fraction: 0.5, training_spacing: 1, periodic: true }
    }
}

/// Block-wise retrieval of a whole dual-polarization frame with pilots
/// predicted through `est`. Pilots closer to a block edge than the
/// transmission-dispersion memory are not imposed, since circular
/// dispersion removal is wrong there. Returns the stitched fields in
/// capture units and per-block reports.
pub fn retrieve_frame(
    cap: &QuadIntensityCapture,
    frame: &SymbolFrame,
    est: &ChannelMatrixEstimate,
    cfg: &RetrievalConfig,
    block: &BlockRetrievalConfig,
) -> Result<([ComplexWaveform; 2], Vec<[RetrievalReport; 2]>)> {
    let sps = frame.spec.samples_per_symbol;
    ensure_same_len(frame.spec.n_samples(), cap.len())?;
    let fs = cap.sample_rate();
    let (streams, positions) = known_streams(frame, block.training_spacing);
    let predicted = propagate_pilots(est, [&streams[0], &streams[1]])?;
    let mut is_known = vec![false; frame.spec.n_symbols()];
    positions.iter().for_each(|&k| is_known[k] = true);
    let scale = 1.0 / cap.a_x.max().max(cap.a_y.max()).max(f64::MIN_POSITIVE);
    let gain = scale.sqrt();
    let guard = cd_memory_symbols(&cfg.link_cd, frame.spec.baud_rate) * sps;
    let b_guard = cap.retrieval_dispersion.map(|d| cd_memory_symbols(&d, frame.spec.baud_rate) * sps);
    let n = cap.len();
    let ext = if block.periodic { (block.block_len / 2 / sps * sps).min(n / sps * sps) } else { 0 };
    let wrap = |t: &IntensityTrace| -> Vec<f64> {
        let mut v = Vec::with_capacity(n + 2 * ext);
        v.extend_from_slice(&t.samples[n - ext..]);
        v.extend_from_slice(&t.samples);
        v.extend_from_slice(&t.samples[..ext]);
        v
    };
    let padded = [wrap(&cap.a_x), wrap(&cap.b_x), wrap(&cap.a_y), wrap(&cap.b_y)];
    let plan = crate::dsp_backend::plan_blocks(n + 2 * ext, block.block_len, block.save_fraction)?;
    let starts: Vec<usize> = plan.blocks.iter().map(|b| b.start).collect();
    if starts.iter().any(|s| s % sps != 0) {
        return Err(Error::Config("block hop must be a whole number of symbols".into()));
    }
    let reports = std::sync::Mutex::new(vec![None; starts.len()]);
    let inputs = [padded[0].as_slice(), padded[1].as_slice(), padded[2].as_slice(), padded[3].as_slice()];
    let out = overlap_save_run(&inputs, block.block_len, block.save_fraction, |b, chunk| {
        let start = starts[b];
        let mut fields = Vec::with_capacity(2);
        let mut reps = Vec::with_capacity(2);
        for pol in 0..2 {
            let a = IntensityTrace { samples: chunk[2 * pol].clone(), sample_rate: fs };
            let bt = IntensityTrace { samples: chunk[2 * pol + 1].clone(), sample_rate: fs };
            let mut idx = Vec::new();
            let mut vals = Vec::new();
            for s in (0..block.block_len).step_by(sps) {
                let pos = start + s;
                let k = (pos + n - ext) % n / sps;
                if is_known[k] && s >= guard && s + guard < block.block_len {
                    idx.push(s);
                    vals.push(predicted[pol][k] * gain);
                }
            }
            let pilots = PilotTargets { samples_per_symbol: sps, indices: idx, values: vals };
            let mut pcfg = cfg.clone();
            pcfg.retrieval_dispersion = cap.retrieval_dispersion[pol];
            pcfg.seed = cfg.seed.wrapping_add((b * 2 + pol) as u64);
            let mut problem = RetrievalProblem::with_scale(&a, &bt, scale, &pcfg, pilots)?;
            problem.set_free_edges(b_guard[pol]);
            let mut rng = ChaCha20Rng::seed_from_u64(pcfg.seed);
            let st = problem.initial_state(&mut rng)?;
            let (state, rep) = run_retrieval_from(&mut problem, st, &mut rng, None)?;
            let g = 1.0 / gain;
            fields.push(state.estimate.iter().map(|z| z * g).collect::<Vec<_>>());
            reps.push(rep);
        }
        let [r0, r1]: [RetrievalReport; 2] = reps.try_into().expect("two polarizations");
        reports.lock().expect("report lock")[b] = Some([r0, r1]);
        Ok(fields)
    })?;
    let reports =
        reports.into_inner().expect("report lock").into_iter().map(|r| r.expect("every block reports")).collect();
    let mut ch = out.channels.into_iter().map(|c| c[ext..ext + n].to_vec());
    let x = ComplexWaveform::new(ch.next().unwrap_or_default(), fs, frame.spec.center_wavelength)?;
    let y = ComplexWaveform::new(ch.next().unwrap_or_default(), fs, frame.spec.center_wavelength)?;
    Ok(([x, y], reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualPolReceiverConfig {
    /// Retrieval settings for payload blocks and the first loop pass.
    /// Pilots constrain the full field by default: with phase-only pilots
    /// and long-haul dispersion the constraint is too weak at 10% overhead.
    pub retrieval: RetrievalConfig,
    pub joint: JointLoopConfig,
    pub blocks: BlockRetrievalConfig,
    pub equalizer: EqualizerConfig,
    /// Carrier-phase averaging window (symbols).
    pub cpr_window: usize,
}

impl Default for DualPolReceiverConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig { pilot_constraint: PilotConstraint::FullField, ..RetrievalConfig::default() },
            joint: JointLoopConfig::default(),
            blocks: BlockRetrievalConfig::default(),
            equalizer: EqualizerConfig::default(),
            cpr_window: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualPolOutcome {
    pub joint: JointEstimation,
    pub block_reports: Vec<[RetrievalReport; 2]>,
    /// Phase-corrected payload symbols per polarization.
    pub payload: [Vec<Complex64>; 2],
    pub ber: BerReport,
}

/// Polarization-diversity receiver: joint estimation on the training block,
/// block-wise retrieval of the frame with predicted pilots, then dispersion
/// compensation, 2x2 equalization, phase recovery and BER counting.
pub fn receive_dual_pol(
    cap: &QuadIntensityCapture,
    frame: &SymbolFrame,
    cfg: &DualPolReceiverConfig,
) -> Result<DualPolOutcome> {
    let joint = joint_estimation_loop(cap, frame, &cfg.retrieval, &cfg.joint)?;
    let (fields, block_reports) = retrieve_frame(cap, frame, &joint.estimate, &cfg.retrieval, &cfg.blocks)?;
    let sps = frame.spec.samples_per_symbol;
    let sym: Vec<Vec<Complex64>> =
        fields.iter().map(|w| compensate_cd(w, &cfg.retrieval.link_cd).decimate(sps, 0)).collect();
    let eq = mimo_equalize([&sym[0], &sym[1]], frame, &cfg.equalizer)?;
    let c = frame.constellation();
    let payload: Vec<Vec<Complex64>> = (0..2)
        .map(|pol| {
            carrier_phase_recovery(&eq.symbols[pol], &c, &PhaseAnchors::payload_pilots(frame, pol), cfg.cpr_window)
        })
        .collect();
    let ber = count_ber(&payload, frame)?;
    let [px, py]: [Vec<Complex64>; 2] = payload.try_into().expect("two polarizations");
    Ok(DualPolOutcome { joint, block_reports, payload: [px, py], ber })
}

#[derive(Serialize, Deserialize)]
struct EstimateHeader {
    n_taps: usize,
    n_full: usize,
    pdl_db: f64,
    iteration: usize,
    lag: isize,
    baud_rate: f64,
    link_cd: DispersionOperator,
    layout: String,
}

const LAYOUT: &str =
    "little-endian f64 (re, im) pairs; h_pm[0][0], h_pm[0][1], h_pm[1][0], h_pm[1][1], then h in the same order";

/// Write an estimate as a JSON header and a binary tap file.
pub fn write_estimate(est: &ChannelMatrixEstimate, header: &Path, taps: &Path) -> Result<()> {
    let hdr = EstimateHeader {
        n_taps: est.n_taps(),
        n_full: est.h[0][0].len(),
        pdl_db: est.pdl_db,
        iteration: est.iteration,
        lag: est.lag,
        baud_rate: est.baud_rate,
        link_cd: est.link_cd,
        layout: LAYOUT.into(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(header)?), &hdr)?;
    let mut w = BufWriter::new(File::create(taps)?);
    for set in [&est.h_pm, &est.h] {
        for row in set {
            for filt in row {
                for z in filt {
                    w.write_all(&z.re.to_le_bytes())?;
                    w.write_all(&z.im.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an estimate written by [`write_estimate`].
pub fn read_estimate(header: &Path, taps: &Path) -> Result<ChannelMatrixEstimate> {
    let hdr: EstimateHeader = serde_json::from_reader(BufReader::new(File::open(header)?))?;
    let mut bytes = Vec::new();
    BufReader::new(File::open(taps)?).read_to_end(&mut bytes)?;
    let expected = 4 * (hdr.n_taps + hdr.n_full) * 16;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { expected, got: bytes.len() });
    }
    let mut vals = bytes.chunks_exact(16).map(|c| {
        let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
        let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
        Complex64::new(re, im)
    });
    let mut take = |len: usize| -> Butterfly {
        let mut b: Butterfly = Default::default();
        for row in b.iter_mut() {
            for f in row.iter_mut() {
                *f = vals.by_ref().take(len).collect();
            }
        }
        b
    };
    let h_pm = take(hdr.n_taps);
    let h = take(hdr.n_full);
    let mut est = ChannelMatrixEstimate::from_h_pm(h_pm, hdr.iteration, hdr.lag, hdr.baud_rate, hdr.link_cd);
    est.h = h;
    Ok(est)
}

/// Wavelength spacing of one symbol-rate bandwidth, used in diagnostics.
pub fn symbol_bandwidth_nm(baud: f64, wavelength: f64) -> f64 {
    baud * wavelength * wavelength / SPEED_OF_LIGHT * 1e9
}
