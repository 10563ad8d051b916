use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{to_db, PhaseInit, PilotConstraint, RetrievalConfig, RetrievalReport};
use crate::channel::DispersionOperator;
use crate::error::{ensure_same_len, Error, Result};
use crate::fft::{bin_frequencies, FftPair};
use crate::waveform::{ComplexWaveform, IntensityTrace, SymbolFrame};

/// Rectangular band-limit centered on the carrier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralMask {
    /// Two-sided passband (Hz).
    pub bandwidth: f64,
}

impl SpectralMask {
    pub fn gains(&self, n: usize, sample_rate: f64) -> Vec<f64> {
        bin_frequencies(n, sample_rate)
            .into_iter()
            .map(|f| if f.abs() <= self.bandwidth / 2.0 { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn apply(&self, x: &mut [Complex64], sample_rate: f64) {
        let gains = self.gains(x.len(), sample_rate);
        let filter: Vec<Complex64> = gains.into_iter().map(|g| Complex64::new(g, 0.0)).collect();
        FftPair::new(x.len()).filter(x, &filter);
    }
}

/// Known field values in the dispersion-free domain, by sample index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PilotTargets {
    pub samples_per_symbol: usize,
    pub indices: Vec<usize>,
    pub values: Vec<Complex64>,
}

impl PilotTargets {
    pub fn none(samples_per_symbol: usize) -> Self {
        Self { samples_per_symbol, ..Self::default() }
    }

    /// Pilots of polarization `pol` at their symbol-center samples, scaled
    /// by `gain` into the units of the normalized field.
    pub fn from_frame(frame: &SymbolFrame, pol: usize, gain: f64) -> Self {
        let sps = frame.spec.samples_per_symbol;
        let idx = frame.pilot_indices();
        Self {
            samples_per_symbol: sps,
            indices: idx.iter().map(|&i| i * sps).collect(),
            values: idx.iter().map(|&i| frame.symbols[pol][i] * gain).collect(),
        }
    }

    /// Every symbol of `symbols` in `range` is treated as known.
    pub fn from_symbols(symbols: &[Complex64], positions: &[usize], samples_per_symbol: usize, gain: f64) -> Self {
        Self {
            samples_per_symbol,
            indices: positions.iter().map(|&i| i * samples_per_symbol).collect(),
            values: positions.iter().map(|&i| symbols[i] * gain).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// Iterate-in-progress of one retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalState {
    /// Current estimate of the received (pre-`D`) field, normalized units.
    pub estimate: Vec<Complex64>,
    pub iteration: usize,
    pub escapes_done: usize,
    pub a_err: Vec<f64>,
}

impl RetrievalState {
    pub fn from_field(estimate: Vec<Complex64>) -> Self {
        let n = estimate.len();
        Self { estimate, iteration: 0, escapes_done: 0, a_err: vec![f64::INFINITY; n] }
    }

    pub fn mean_a_err(&self) -> f64 {
        self.a_err.iter().sum::<f64>() / self.a_err.len().max(1) as f64
    }
}

#[inline]
fn unit(z: Complex64) -> Complex64 {
    let n = z.norm();
    if n > 0.0 {
        z / n
    } else {
        Complex64::new(1.0, 0.0)
    }
}

/// `mag[i] * exp(j arg(field[i]))`, in place.
pub fn replace_amplitude(field: &mut [Complex64], mag: &[f64]) {
    for (z, &m) in field.iter_mut().zip(mag) {
        *z = unit(*z) * m;
    }
}

/// Impose known pilot values on a dispersion-free field.
pub fn apply_pilots(field: &mut [Complex64], pilots: &PilotTargets, mode: PilotConstraint) {
    for (&i, &p) in pilots.indices.iter().zip(&pilots.values) {
        field[i] = match mode {
            PilotConstraint::PhaseOnly => unit(p) * field[i].norm(),
            PilotConstraint::FullField => p,
        };
    }
}

/// Scale `a` by its maximum and `b` to the same mean, returning the factor
/// applied to `a`. The dispersive element is lossless, so both planes must
/// carry equal energy.
pub fn normalize_traces(a: &IntensityTrace, b: &IntensityTrace) -> (Vec<f64>, Vec<f64>, f64) {
    let scale = 1.0 / a.max().max(f64::MIN_POSITIVE);
    let (an, bn) = scale_traces(a, b, scale);
    (an, bn, scale)
}

fn scale_traces(a: &IntensityTrace, b: &IntensityTrace, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let an: Vec<f64> = a.samples.iter().map(|v| (v * scale).max(0.0)).collect();
    let target = an.iter().sum::<f64>();
    let bsum = b.samples.iter().map(|v| v.max(0.0)).sum::<f64>().max(f64::MIN_POSITIVE);
    let bn = b.samples.iter().map(|v| v.max(0.0) * target / bsum).collect();
    (an, bn)
}

struct Projection {
    sqrt_b: Vec<f64>,
    /// Pilot domain (or estimate) to dispersed plane, `1/n` folded in.
    forward: Vec<Complex64>,
    /// Dispersed plane back to the estimate, with the mask and `1/n`.
    back: Vec<Complex64>,
}

/// Precomputed filters and normalized measurements for repeated iterations.
pub struct RetrievalProblem {
    cfg: RetrievalConfig,
    sample_rate: f64,
    a: Vec<f64>,
    sqrt_a: Vec<f64>,
    scale: f64,
    pilots: PilotTargets,
    link_inverse: Vec<Complex64>,
    mask: Vec<f64>,
    projections: Vec<Projection>,
    fft: FftPair,
    work: Vec<Complex64>,
    free_edges: usize,
}

impl RetrievalProblem {
    /// Normalizes `a` by its maximum and `b` to the same energy.
    pub fn new(a: &IntensityTrace, b: &IntensityTrace, cfg: &RetrievalConfig, pilots: PilotTargets) -> Result<Self> {
        let scale = 1.0 / a.max().max(f64::MIN_POSITIVE);
        Self::with_scale(a, b, scale, cfg, pilots)
    }

    /// Like [`RetrievalProblem::new`] with an explicit intensity scale for `a`.
    pub fn with_scale(
        a: &IntensityTrace,
        b: &IntensityTrace,
        scale: f64,
        cfg: &RetrievalConfig,
        pilots: PilotTargets,
    ) -> Result<Self> {
        Self::with_projections(a, &[(cfg.retrieval_dispersion, b)], scale, cfg, pilots)
    }

    pub(crate) fn with_projections(
        a: &IntensityTrace,
        planes: &[(DispersionOperator, &IntensityTrace)],
        scale: f64,
        cfg: &RetrievalConfig,
        pilots: PilotTargets,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = a.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty intensity trace".into()));
        }
        if planes.is_empty() {
            return Err(Error::InvalidInput("no dispersed measurement".into()));
        }
        if pilots.indices.iter().any(|&i| i >= n) || pilots.indices.len() != pilots.values.len() {
            return Err(Error::InvalidInput("pilot targets outside the block".into()));
        }
        let fs = a.sample_rate;
        let inv_n = 1.0 / n as f64;
        let mask = match cfg.mask_bandwidth {
            Some(bw) => SpectralMask { bandwidth: bw }.gains(n, fs),
            None => vec![1.0; n],
        };
        let link = cfg.link_cd.transfer(n, fs);
        let link_inverse: Vec<Complex64> = link.iter().map(|h| h.conj() * inv_n).collect();
        let mut projections = Vec::with_capacity(planes.len());
        let mut an = Vec::new();
        for (d, b) in planes {
            if d.is_identity() {
                return Err(Error::Config("retrieval dispersion must be nonzero".into()));
            }
            ensure_same_len(n, b.len())?;
            let (a_s, b_s) = scale_traces(a, b, scale);
            an = a_s;
            let h = d.transfer(n, fs);
            let forward = h
                .iter()
                .zip(&link)
                .map(|(hd, hl)| if pilots.is_empty() { hd * inv_n } else { hd * hl * inv_n })
                .collect();
            let back = h.iter().zip(&mask).map(|(hd, m)| hd.conj() * (m * inv_n)).collect();
            projections.push(Projection { sqrt_b: b_s.iter().map(|v| v.sqrt()).collect(), forward, back });
        }
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate: fs,
            sqrt_a: an.iter().map(|v| v.sqrt()).collect(),
            a: an,
            scale,
            pilots,
            link_inverse,
            mask,
            projections,
            fft: FftPair::new(n),
            work: vec![Complex64::new(0.0, 0.0); n],
            free_edges: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.cfg
    }

    /// Factor applied to the raw `a` trace; fields scale by its square root.
    pub fn intensity_scale(&self) -> f64 {
        self.scale
    }

    pub fn normalized_a(&self) -> &[f64] {
        &self.a
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.pilots.samples_per_symbol.max(1)
    }

    /// Leave the dispersed-plane amplitude unconstrained for `samples` at
    /// each end. Used for blocks cut from a longer stream, whose dispersed
    /// intensity near the edges depends on samples outside the block.
    pub fn set_free_edges(&mut self, samples: usize) {
        self.free_edges = samples.min(self.len() / 2);
    }

    pub fn n_projections(&self) -> usize {
        self.projections.len()
    }

    /// Initial state according to `cfg.init`.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RetrievalState> {
        let estimate = match &self.cfg.init {
            PhaseInit::RandomUniform => {
                self.sqrt_a.iter().map(|&m| Complex64::from_polar(m, rng.random_range(-PI..PI))).collect()
            }
            PhaseInit::Provided(phases) => {
                ensure_same_len(self.len(), phases.len())?;
                self.sqrt_a.iter().zip(phases).map(|(&m, &p)| Complex64::from_polar(m, p)).collect()
            }
        };
        Ok(RetrievalState::from_field(estimate))
    }

    /// One full cycle against dispersed plane `plane`.
    pub fn iterate_plane(&mut self, state: &mut RetrievalState, plane: usize) -> Result<()> {
        ensure_same_len(self.len(), state.estimate.len())?;
        let proj = &self.projections[plane];
        let w = &mut self.work;
        w.copy_from_slice(&state.estimate);
        replace_amplitude(w, &self.sqrt_a);
        if !self.pilots.is_empty() {
            self.fft.forward(w);
            w.iter_mut().zip(&self.link_inverse).for_each(|(v, h)| *v *= h);
            self.fft.inverse_raw(w);
            apply_pilots(w, &self.pilots, self.cfg.pilot_constraint);
        }
        self.fft.forward(w);
        w.iter_mut().zip(&proj.forward).for_each(|(v, h)| *v *= h);
        self.fft.inverse_raw(w);
        let g = self.free_edges;
        let n = w.len();
        replace_amplitude(&mut w[g..n - g], &proj.sqrt_b[g..n - g]);
        self.fft.forward(w);
        w.iter_mut().zip(&proj.back).for_each(|(v, h)| *v *= h);
        self.fft.inverse_raw(w);
        state.estimate.copy_from_slice(w);
        for ((e, z), a) in state.a_err.iter_mut().zip(&state.estimate).zip(&self.a) {
            *e = (a - z.norm_sqr()).powi(2);
        }
        state.iteration += 1;
        Ok(())
    }

    pub fn iterate(&mut self, state: &mut RetrievalState) -> Result<()> {
        self.iterate_plane(state, 0)
    }

    /// Bring a received-domain field into the dispersion-free domain.
    pub fn remove_link_cd(&mut self, field: &[Complex64]) -> Vec<Complex64> {
        let mut buf = field.to_vec();
        self.fft.forward(&mut buf);
        buf.iter_mut().zip(&self.link_inverse).for_each(|(v, h)| *v *= h);
        self.fft.inverse_raw(&mut buf);
        buf
    }

    /// Per-symbol `|delta theta|` between the estimate and `truth`, both
    /// taken to the dispersion-free domain. `truth` is first band-limited by
    /// the spectral mask, which is the part of the field the estimate can
    /// represent.
    pub fn delta_theta(&mut self, estimate: &[Complex64], truth: &[Complex64]) -> Result<Vec<f64>> {
        ensure_same_len(self.len(), truth.len())?;
        let mut t = truth.to_vec();
        self.fft.forward(&mut t);
        let n = self.len() as f64;
        for ((v, h), m) in t.iter_mut().zip(&self.link_inverse).zip(&self.mask) {
            *v *= h * *m * n;
        }
        self.fft.inverse(&mut t);
        let e = self.remove_link_cd(estimate);
        let sps = self.samples_per_symbol();
        Ok(e.iter().zip(&t).step_by(sps).map(|(x, y)| (x * y.conj()).arg().abs()).collect())
    }
}

/// One modified Gerchberg-Saxton cycle.
pub fn gs_iteration(state: &mut RetrievalState, problem: &mut RetrievalProblem) -> Result<()> {
    problem.iterate(state)
}

/// Re-draw phases of samples whose error exceeds `epsilon`; amplitudes and
/// all other samples are untouched.
pub fn escape_local_minimum<R: Rng + ?Sized>(state: &mut RetrievalState, cfg: &RetrievalConfig, rng: &mut R) {
    for (z, &e) in state.estimate.iter_mut().zip(&state.a_err) {
        if e > cfg.epsilon {
            *z = Complex64::from_polar(z.norm(), rng.random_range(-PI..PI));
        }
    }
    state.escapes_done += 1;
}

/// Run to convergence or budget exhaustion. Non-convergence is reported,
/// not an error.
pub fn run_retrieval(
    a: &IntensityTrace,
    b: &IntensityTrace,
    cfg: &RetrievalConfig,
    pilots: PilotTargets,
    truth: Option<&ComplexWaveform>,
) -> Result<(ComplexWaveform, RetrievalReport)> {
    ensure_same_len(a.len(), b.len())?;
    let mut problem = RetrievalProblem::new(a, b, cfg, pilots)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let state = problem.initial_state(&mut rng)?;
    let (state, report) = run_retrieval_from(&mut problem, state, &mut rng, truth)?;
    let wave = ComplexWaveform::new(state.estimate, a.sample_rate, cfg.retrieval_dispersion.center_wavelength)?;
    Ok((wave, report))
}

/// Drive an existing problem/state pair with escapes every `reset_period`.
pub fn run_retrieval_from<R: Rng + ?Sized>(
    problem: &mut RetrievalProblem,
    mut state: RetrievalState,
    rng: &mut R,
    truth: Option<&ComplexWaveform>,
) -> Result<(RetrievalState, RetrievalReport)> {
    let cfg = problem.config().clone();
    let budget = cfg.iteration_budget();
    let mut report = RetrievalReport::default();
    let mut best: Option<(f64, RetrievalState)> = None;
    for it in 1..=budget {
        problem.iterate(&mut state)?;
        let mean = state.mean_a_err();
        report.mean_a_err_db.push(to_db(mean));
        if mean < cfg.stop_threshold() {
            report.converged = true;
            break;
        }
        if cfg.keep_best && best.as_ref().is_none_or(|(m, _)| mean < *m) {
            best = Some((mean, state.clone()));
        }
        if it % cfg.reset_period == 0 && state.escapes_done < cfg.max_escapes && it < budget {
            escape_local_minimum(&mut state, &cfg, rng);
            report.escape_iterations.push(it);
        }
    }
    if let Some((m, mut b)) = best {
        if !report.converged && m < state.mean_a_err() {
            b.iteration = state.iteration;
            b.escapes_done = state.escapes_done;
            state = b;
        }
    }
    finish_report(problem, &state, &mut report, truth)?;
    Ok((state, report))
}

pub(crate) fn finish_report(
    problem: &mut RetrievalProblem,
    state: &RetrievalState,
    report: &mut RetrievalReport,
    truth: Option<&ComplexWaveform>,
) -> Result<()> {
    let sps = problem.samples_per_symbol();
    report.iterations_used = state.iteration;
    report.escapes_done = state.escapes_done;
    report.final_mean_a_err = state.mean_a_err();
    report.symbol_a_err = state.a_err.iter().step_by(sps).copied().collect();
    if let Some(t) = truth {
        report.delta_theta = Some(problem.delta_theta(&state.estimate, &t.samples)?);
    }
    Ok(())
}
