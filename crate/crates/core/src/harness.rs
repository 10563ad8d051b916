//! Scenario orchestration: configuration, sweep grids, the end-to-end
//! simulation of one grid point, and CSV/JSON reports.
//!
//! A scenario file is JSON; unknown keys are rejected. Every grid point is
//! `(sweep value, seed)` and is reproducible from the file alone: the frame,
//! noise, converter and polarization channel draw from streams derived from
//! the seed only, so points sharing a seed see the same realizations across
//! sweep values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    apply_dispersion, apply_polarization_channel, load_noise, photodetect, quantize_enob, DispersionOperator,
    NoiseModel, PolarizationChannel, PolarizationChannelSpec, FIBER_PS_PER_NM_PER_KM,
};
use crate::dsp_backend::{count_ber, interpolate_osnr_at, recover_single_pol, required_osnr_db, theory_ber};
use crate::error::{Error, Result};
use crate::phase_retrieval::{
    run_retrieval, CalibrationPoint, EpsilonTable, PhaseInit, PilotTargets, RetrievalConfig, RetrievalReport,
};
use crate::pol_rx::{receive_dual_pol, DualPolReceiverConfig, QuadIntensityCapture};
use crate::waveform::{
    build_frame, shape_pulse, write_intensities, ComplexWaveform, Constellation, FrameSpec, IntensityTrace, Modulation,
    PilotAmplitude, SymbolFrame,
};

/// Columns of the CSV report, in order.
pub const CSV_COLUMNS: [&str; 8] =
    ["scenario_id", "seed", "sweep_value", "ber", "mean_a_err_db", "iterations", "converged", "wall_time_s"];

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "PRISM_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    OsnrDb,
    /// Retrieval dispersion in ps/nm.
    RetrievalDispersion,
    PilotOverhead,
    Enob,
    LengthKm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSpec {
    pub length_km: f64,
    pub ps_per_nm_per_km: f64,
    /// Birefringent sections of the polarization channel (dual-pol only).
    pub pmd_sections: usize,
    /// Total DGD (s) of the polarization channel (dual-pol only).
    pub dgd_total: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self { length_km: 60.0, ps_per_nm_per_km: FIBER_PS_PER_NM_PER_KM, pmd_sections: 8, dgd_total: 5e-12 }
    }
}

impl LinkSpec {
    pub fn dispersion(&self) -> DispersionOperator {
        DispersionOperator::fiber(self.length_km, self.ps_per_nm_per_km)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Receiver {
    #[default]
    SinglePol,
    DualPol,
}

/// Calibration runs: retrieval from the true received phases, on seeds
/// kept apart from the measurement seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub seeds: Vec<u64>,
    pub iterations: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self { seeds: vec![1001, 1002], iterations: 300 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    /// Report directory used when none is given on the command line.
    pub dir: Option<PathBuf>,
    /// Write per-point convergence CSVs.
    pub trace_convergence: bool,
    /// Write the detected intensity traces of every point.
    pub save_captures: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub modulation: Modulation,
    pub baud: f64,
    /// Payload symbols per polarization.
    pub n_symbols: usize,
    pub n_training: usize,
    pub samples_per_symbol: usize,
    pub rolloff: f64,
    pub pilot_overhead: f64,
    pub pilot_amplitude: PilotAmplitude,
    /// `None` is noiseless.
    pub osnr_db: Option<f64>,
    /// `None` is an ideal digitizer.
    pub enob: Option<f64>,
    pub link: LinkSpec,
    pub receiver: Receiver,
    /// Single-polarization retrieval settings. The link dispersion is
    /// filled in from `link`.
    pub retrieval: RetrievalConfig,
    /// Dual-polarization receiver settings.
    pub dual_pol: DualPolReceiverConfig,
    /// Carrier-phase window of the single-polarization back end (symbols).
    pub cpr_window: usize,
    /// Calibrated thresholds; the configured `epsilon` is used when absent.
    pub epsilon_table: Option<EpsilonTable>,
    /// Measure a table for every sweep value before running it. Ignored
    /// when `epsilon_table` is given.
    pub calibration: Option<CalibrationSpec>,
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    pub outputs: Outputs,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            id: "scenario".into(),
            modulation: Modulation::Qpsk,
            baud: 30e9,
            n_symbols: 1 << 11,
            n_training: 0,
            samples_per_symbol: 2,
            rolloff: 0.1,
            pilot_overhead: 0.2,
            pilot_amplitude: PilotAmplitude::Constellation,
            osnr_db: None,
            enob: None,
            link: LinkSpec::default(),
            receiver: Receiver::SinglePol,
            retrieval: RetrievalConfig::default(),
            dual_pol: DualPolReceiverConfig::default(),
            cpr_window: 64,
            epsilon_table: None,
            calibration: None,
            sweep: Sweep { variable: SweepVariable::OsnrDb, values: Vec::new() },
            seeds: vec![1],
            outputs: Outputs::default(),
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::Config("sweep has no values".into()));
        }
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::Config("id must be a nonempty file-name-safe string".into()));
        }
        for &v in &self.sweep.values {
            let ok = match self.sweep.variable {
                SweepVariable::OsnrDb => v.is_finite(),
                SweepVariable::RetrievalDispersion => v.is_finite() && v != 0.0,
                SweepVariable::PilotOverhead => (0.0..1.0).contains(&v),
                SweepVariable::Enob => v > 0.0,
                SweepVariable::LengthKm => v.is_finite() && v >= 0.0,
            };
            if !ok {
                return Err(Error::Config(format!("sweep value {v} is invalid for {:?}", self.sweep.variable)));
            }
        }
        if self.n_symbols == 0 {
            return Err(Error::Config("n_symbols must be positive".into()));
        }
        if self.receiver == Receiver::DualPol && self.n_training == 0 {
            return Err(Error::Config("the dual-polarization receiver needs a training block".into()));
        }
        if let Some(c) = &self.calibration {
            if self.receiver == Receiver::DualPol {
                return Err(Error::Config("calibration runs support the single-polarization receiver".into()));
            }
            if c.seeds.is_empty() || c.iterations == 0 {
                return Err(Error::Config("calibration needs seeds and iterations".into()));
            }
        }
        if let Some(e) = self.enob {
            if !(e > 0.0) {
                return Err(Error::Config("enob must be positive".into()));
            }
        }
        self.frame_spec().validate()?;
        self.retrieval.validate()?;
        self.dual_pol.retrieval.validate()?;
        self.dual_pol.equalizer.validate()?;
        Ok(())
    }

    pub fn frame_spec(&self) -> FrameSpec {
        FrameSpec {
            n_training_symbols: self.n_training,
            n_payload_symbols: self.n_symbols,
            pilot_overhead: self.pilot_overhead,
            baud_rate: self.baud,
            samples_per_symbol: self.samples_per_symbol,
            rolloff: self.rolloff,
            pilot_amplitude: self.pilot_amplitude,
            ..FrameSpec::default()
        }
    }

    /// This scenario with the sweep variable set to `value`.
    pub fn at(&self, value: f64) -> Scenario {
        let mut s = self.clone();
        match self.sweep.variable {
            SweepVariable::OsnrDb => s.osnr_db = Some(value),
            SweepVariable::RetrievalDispersion => {
                s.retrieval.retrieval_dispersion.total_ps_per_nm = value;
                s.dual_pol.retrieval.retrieval_dispersion.total_ps_per_nm = value;
            }
            SweepVariable::PilotOverhead => s.pilot_overhead = value,
            SweepVariable::Enob => s.enob = Some(value),
            SweepVariable::LengthKm => s.link.length_km = value,
        }
        s
    }

    fn n_pol(&self) -> usize {
        match self.receiver {
            Receiver::SinglePol => 1,
            Receiver::DualPol => 2,
        }
    }
}

/// One report row. The first eight fields are the CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario_id: String,
    pub seed: u64,
    pub sweep_value: f64,
    /// `NaN` when the point failed.
    pub ber: f64,
    pub mean_a_err_db: f64,
    /// Retrieval iterations summed over polarizations and blocks.
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
    pub bit_errors: usize,
    pub bits_counted: usize,
    /// Fraction of symbols with retrieved phase within 0.1 rad
    /// (single-polarization only).
    pub phase_within_0p1_rad: Option<f64>,
    /// Final channel-estimate PDL (dual-polarization only).
    pub pdl_db: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub rows: Vec<ResultRow>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker count; falls back to `PRISM_THREADS`, then to rayon's default.
    pub threads: Option<usize>,
    /// Directory for convergence traces and saved captures.
    pub artifact_dir: Option<PathBuf>,
    pub trace_convergence: bool,
    pub save_captures: bool,
}

/// Worker count from `PRISM_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Run every `(sweep value, seed)` point. Rows come back in config order
/// (sweep values outer, seeds inner) whatever the completion order. A point
/// that fails at run time yields a flagged row rather than an error.
pub fn run_scenario(s: &Scenario, opts: &RunOptions) -> Result<ScenarioResult> {
    s.validate()?;
    let grid: Vec<(usize, f64, u64)> =
        s.sweep.values.iter().enumerate().flat_map(|(i, &v)| s.seeds.iter().map(move |&seed| (i, v, seed))).collect();
    if let Some(dir) = &opts.artifact_dir {
        if opts.trace_convergence || opts.save_captures {
            std::fs::create_dir_all(dir)?;
        }
    }
    let threads = match opts.threads {
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows = pool.install(|| -> Result<Vec<ResultRow>> {
        let points: Vec<Scenario> = s.sweep.values.par_iter().map(|&v| calibrated(s.at(v))).collect::<Result<_>>()?;
        grid.par_iter().map(|&(i, v, seed)| run_point(&points[i], i, v, seed, opts)).collect()
    })?;
    Ok(ScenarioResult { scenario: s.clone(), rows })
}

fn calibrated(mut s: Scenario) -> Result<Scenario> {
    if let (None, Some(c)) = (&s.epsilon_table, &s.calibration) {
        s.epsilon_table = Some(calibrate_epsilon(&s, &[s.osnr_db], &c.seeds, c.iterations)?);
    }
    Ok(s)
}

struct Artifacts<'a> {
    dir: Option<&'a Path>,
    stem: String,
    trace: bool,
    captures: bool,
}

impl Artifacts<'_> {
    fn trace(&self, suffix: &str, report: &RetrievalReport) -> Result<()> {
        if let (true, Some(dir)) = (self.trace, self.dir) {
            let f = File::create(dir.join(format!("{}{suffix}_convergence.csv", self.stem)))?;
            report.write_convergence_csv(BufWriter::new(f))?;
        }
        Ok(())
    }

    /// One data file per trace, named `<stem>_<name>.bin`, sharing the
    /// single-channel sidecar `<stem>_meta.json`.
    fn capture(&self, traces: &[(&str, &IntensityTrace)], wavelength: f64) -> Result<()> {
        if let (true, Some(dir)) = (self.captures, self.dir) {
            let meta = dir.join(format!("{}_meta.json", self.stem));
            for (name, t) in traces {
                write_intensities(&[t], wavelength, &meta, &dir.join(format!("{}_{name}.bin", self.stem)))?;
            }
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const NOISE_STREAM: u64 = 1;
const ENOB_STREAM: u64 = 2;

fn run_point(s: &Scenario, index: usize, value: f64, seed: u64, opts: &RunOptions) -> Result<ResultRow> {
    let start = Instant::now();
    let art = Artifacts {
        dir: opts.artifact_dir.as_deref(),
        stem: format!("{}_v{index}_s{seed}", s.id),
        trace: opts.trace_convergence || s.outputs.trace_convergence,
        captures: opts.save_captures || s.outputs.save_captures,
    };
    let mut row = ResultRow {
        scenario_id: s.id.clone(),
        seed,
        sweep_value: value,
        ber: f64::NAN,
        mean_a_err_db: f64::NAN,
        iterations: 0,
        converged: false,
        wall_time_s: 0.0,
        bit_errors: 0,
        bits_counted: 0,
        phase_within_0p1_rad: None,
        pdl_db: None,
        error: None,
    };
    let outcome = match s.receiver {
        Receiver::SinglePol => simulate_single_pol(s, seed, &art, &mut row),
        Receiver::DualPol => simulate_dual_pol(s, seed, &art, &mut row),
    };
    match outcome {
        Ok(()) => {}
        Err(e @ (Error::Io(_) | Error::Config(_))) => return Err(e),
        Err(e) => row.error = Some(e.to_string()),
    }
    row.wall_time_s = start.elapsed().as_secs_f64();
    Ok(row)
}

fn to_db(x: f64) -> f64 {
    10.0 * x.max(1e-300).log10()
}

/// Transmitted waveforms of a frame through fiber dispersion (and the
/// polarization channel for two polarizations), with noise loaded.
pub fn simulate_link(s: &Scenario, frame: &SymbolFrame, seed: u64) -> Result<Vec<ComplexWaveform>> {
    let spec = &frame.spec;
    let mut pols: Vec<ComplexWaveform> =
        frame.symbols.iter().map(|sym| shape_pulse(sym, spec)).collect::<Result<_>>()?;
    if pols.len() == 2 {
        let ch = PolarizationChannel::random(&PolarizationChannelSpec {
            seed,
            n_sections: s.link.pmd_sections,
            total_dgd: s.link.dgd_total,
        });
        let (x, y) = apply_polarization_channel(&pols[0], &pols[1], &ch)?;
        pols = vec![x, y];
    }
    let link = s.link.dispersion();
    let mut rx: Vec<ComplexWaveform> = pols.iter().map(|w| apply_dispersion(w, &link)).collect();
    let model = NoiseModel { target_osnr_db: s.osnr_db, ..NoiseModel::default() };
    load_noise(&mut rx, &model, &mut stream(seed, NOISE_STREAM))?;
    Ok(rx)
}

fn digitize(t: IntensityTrace, enob: Option<f64>, rng: &mut ChaCha20Rng) -> Result<IntensityTrace> {
    match enob {
        Some(e) => quantize_enob(&t, e, rng),
        None => Ok(t),
    }
}

/// Pilot gain for max-normalized single-polarization traces: unit-power
/// symbols map to `sqrt(mean(a_n) / (1 - rolloff/4))` at symbol centers.
pub fn single_pol_pilot_gain(a: &IntensityTrace, rolloff: f64) -> f64 {
    (a.mean() / a.max().max(f64::MIN_POSITIVE) / (1.0 - rolloff / 4.0)).sqrt()
}

/// Single-polarization retrieval settings for scenario `s` at `osnr_db`.
pub fn single_pol_config(s: &Scenario, seed: u64) -> RetrievalConfig {
    let mut cfg = s.retrieval.clone();
    cfg.link_cd = s.link.dispersion();
    cfg.seed = seed;
    match &s.epsilon_table {
        Some(t) => t.apply(&cfg, s.osnr_db),
        None => cfg,
    }
}

fn simulate_single_pol(s: &Scenario, seed: u64, art: &Artifacts, row: &mut ResultRow) -> Result<()> {
    let spec = s.frame_spec();
    let frame = build_frame(seed, &spec, &Constellation::new(s.modulation), 1)?;
    let rx = simulate_link(s, &frame, seed)?.remove(0);
    let cfg = single_pol_config(s, seed);
    let mut enob_rng = stream(seed, ENOB_STREAM);
    let a = digitize(photodetect(&rx), s.enob, &mut enob_rng)?;
    let b = digitize(photodetect(&apply_dispersion(&rx, &cfg.retrieval_dispersion)), s.enob, &mut enob_rng)?;
    art.capture(&[("a", &a), ("b", &b)], spec.center_wavelength)?;
    let pilots = PilotTargets::from_frame(&frame, 0, single_pol_pilot_gain(&a, spec.rolloff));
    let (field, report) = run_retrieval(&a, &b, &cfg, pilots, Some(&rx))?;
    art.trace("", &report)?;
    row.mean_a_err_db = to_db(report.final_mean_a_err);
    row.iterations = report.iterations_used;
    row.converged = report.converged;
    row.phase_within_0p1_rad = report.fraction_within(0.1);
    let payload = recover_single_pol(&field, &cfg.link_cd, &frame, 0, s.cpr_window)?;
    let ber = count_ber(&[payload], &frame)?;
    row.ber = ber.ber;
    row.bit_errors = ber.bit_errors;
    row.bits_counted = ber.bits_counted;
    Ok(())
}

fn simulate_dual_pol(s: &Scenario, seed: u64, art: &Artifacts, row: &mut ResultRow) -> Result<()> {
    let spec = s.frame_spec();
    let frame = build_frame(seed, &spec, &Constellation::new(s.modulation), 2)?;
    let rx = simulate_link(s, &frame, seed)?;
    let mut cfg = s.dual_pol.clone();
    cfg.retrieval.link_cd = s.link.dispersion();
    cfg.retrieval.seed = seed;
    if let Some(t) = &s.epsilon_table {
        cfg.retrieval = t.apply(&cfg.retrieval, s.osnr_db);
    }
    let d = cfg.retrieval.retrieval_dispersion;
    let clean = QuadIntensityCapture::detect([&rx[0], &rx[1]], [d, d])?;
    let mut enob_rng = stream(seed, ENOB_STREAM);
    let cap = QuadIntensityCapture::new(
        digitize(clean.a_x, s.enob, &mut enob_rng)?,
        digitize(clean.b_x, s.enob, &mut enob_rng)?,
        digitize(clean.a_y, s.enob, &mut enob_rng)?,
        digitize(clean.b_y, s.enob, &mut enob_rng)?,
        [d, d],
    )?;
    art.capture(&[("a_x", &cap.a_x), ("b_x", &cap.b_x), ("a_y", &cap.a_y), ("b_y", &cap.b_y)], spec.center_wavelength)?;
    let out = receive_dual_pol(&cap, &frame, &cfg)?;
    let mut reports: Vec<&RetrievalReport> = out.joint.reports.iter().flatten().collect();
    reports.extend(out.block_reports.iter().flatten());
    for (k, r) in out.joint.reports.iter().enumerate() {
        art.trace(&format!("_pass{}_x", k + 1), &r[0])?;
        art.trace(&format!("_pass{}_y", k + 1), &r[1])?;
    }
    let blocks: Vec<&RetrievalReport> = out.block_reports.iter().flatten().collect();
    let mean = blocks.iter().map(|r| r.final_mean_a_err).sum::<f64>() / blocks.len().max(1) as f64;
    row.mean_a_err_db = to_db(mean);
    row.iterations = reports.iter().map(|r| r.iterations_used).sum();
    row.converged = blocks.iter().all(|r| r.converged);
    row.pdl_db = Some(out.joint.estimate.pdl_db);
    row.ber = out.ber.ber;
    row.bit_errors = out.ber.bit_errors;
    row.bits_counted = out.ber.bits_counted;
    Ok(())
}

/// Measure the converged error floor at each OSNR by starting retrieval
/// from the true received phases, averaged (geometrically) over `seeds`.
/// `base` supplies everything except the OSNR.
pub fn calibrate_epsilon(
    base: &Scenario,
    osnrs: &[Option<f64>],
    seeds: &[u64],
    iterations: usize,
) -> Result<EpsilonTable> {
    if osnrs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("calibration needs OSNR points and seeds".into()));
    }
    let mut points = Vec::with_capacity(osnrs.len());
    for &osnr in osnrs {
        let mut s = base.clone();
        s.osnr_db = osnr;
        s.receiver = Receiver::SinglePol;
        let logs: Vec<f64> = seeds
            .iter()
            .map(|&seed| -> Result<f64> {
                let frame = build_frame(seed, &s.frame_spec(), &Constellation::new(s.modulation), 1)?;
                let rx = simulate_link(&s, &frame, seed)?.remove(0);
                let mut cfg = s.retrieval.clone();
                cfg.link_cd = s.link.dispersion();
                cfg.seed = seed;
                cfg.max_escapes = 0;
                cfg.max_iterations = Some(iterations);
                cfg.stop_below = Some(0.0);
                cfg.init = PhaseInit::Provided(rx.samples.iter().map(|z| z.arg()).collect());
                let mut enob_rng = stream(seed, ENOB_STREAM);
                let a = digitize(photodetect(&rx), s.enob, &mut enob_rng)?;
                let b =
                    digitize(photodetect(&apply_dispersion(&rx, &cfg.retrieval_dispersion)), s.enob, &mut enob_rng)?;
                let pilots = PilotTargets::from_frame(&frame, 0, single_pol_pilot_gain(&a, s.rolloff));
                let (_, rep) = run_retrieval(&a, &b, &cfg, pilots, None)?;
                Ok(rep.final_mean_a_err.max(1e-300).ln())
            })
            .collect::<Result<_>>()?;
        let floor = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
        points.push(CalibrationPoint { osnr_db: osnr, floor });
    }
    Ok(EpsilonTable { points, ..EpsilonTable::default() })
}

/// Write `<id>.csv` and `<id>.json` into `dir`. An empty result is an error
/// and creates nothing.
pub fn emit_report(result: &ScenarioResult, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if result.rows.is_empty() {
        return Err(Error::InvalidInput("no rows to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{}.csv", result.scenario.id));
    let json = dir.join(format!("{}.json", result.scenario.id));
    write_csv(&result.rows, BufWriter::new(File::create(&csv)?))?;
    let mut w = BufWriter::new(File::create(&json)?);
    serde_json::to_writer_pretty(&mut w, result)?;
    w.flush()?;
    Ok((csv, json))
}

/// Rows as CSV with the fixed columns. Floats use the shortest
/// representation that reads back to the same value.
pub fn write_csv<W: Write>(rows: &[ResultRow], mut out: W) -> Result<()> {
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scenario_id, r.seed, r.sweep_value, r.ber, r.mean_a_err_db, r.iterations, r.converged, r.wall_time_s
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_result(path: &Path) -> Result<ScenarioResult> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Bits pooled over seeds at one sweep value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sweep_value: f64,
    pub ber: f64,
    pub bit_errors: usize,
    pub bits_counted: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario_id: String,
    pub variable: SweepVariable,
    pub points: Vec<SweepPoint>,
    /// For OSNR sweeps: interpolated OSNR at `target_ber`, the theory
    /// requirement, and their difference.
    pub target_ber: f64,
    pub required_osnr_db: Option<f64>,
    pub theory_osnr_db: Option<f64>,
    pub penalty_db: Option<f64>,
}

/// Pool rows per sweep value and, for OSNR sweeps, locate `target_ber`.
pub fn summarize(result: &ScenarioResult, target_ber: f64) -> Result<Summary> {
    let s = &result.scenario;
    let points: Vec<SweepPoint> = s
        .sweep
        .values
        .iter()
        .map(|&v| {
            let rows = result.rows.iter().filter(|r| r.sweep_value == v);
            let (mut e, mut n, mut failed) = (0, 0, 0);
            for r in rows {
                if r.error.is_some() {
                    failed += 1;
                } else {
                    e += r.bit_errors;
                    n += r.bits_counted;
                }
            }
            SweepPoint {
                sweep_value: v,
                ber: if n == 0 { f64::NAN } else { e as f64 / n as f64 },
                bit_errors: e,
                bits_counted: n,
                failed,
            }
        })
        .collect();
    let (mut req, mut theory, mut penalty) = (None, None, None);
    if s.sweep.variable == SweepVariable::OsnrDb {
        let curve: Vec<(f64, f64)> =
            points.iter().filter(|p| p.ber.is_finite()).map(|p| (p.sweep_value, p.ber)).collect();
        req = interpolate_osnr_at(&curve, target_ber);
        theory = Some(required_osnr_db(target_ber, s.modulation, s.baud, s.n_pol())?);
        penalty = req.zip(theory).map(|(r, t)| r - t);
    }
    Ok(Summary {
        scenario_id: s.id.clone(),
        variable: s.sweep.variable,
        points,
        target_ber,
        required_osnr_db: req,
        theory_osnr_db: theory,
        penalty_db: penalty,
    })
}

/// Theory BER on an OSNR grid, as `(osnr_db, ber)`.
pub fn theory_curve(modulation: Modulation, baud: f64, n_pol: usize, osnrs: &[f64]) -> Vec<(f64, f64)> {
    osnrs.iter().map(|&o| (o, theory_ber(o, modulation, baud, n_pol))).collect()
}

pub fn write_theory_csv<W: Write>(curve: &[(f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "osnr_db,ber")?;
    for (o, b) in curve {
        writeln!(out, "{o},{b}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(values: Vec<f64>, seeds: Vec<u64>) -> Scenario {
        Scenario {
            id: "t".into(),
            n_symbols: 256,
            retrieval: RetrievalConfig { max_iterations: Some(50), ..RetrievalConfig::default() },
            osnr_db: Some(20.0),
            sweep: Sweep { variable: SweepVariable::OsnrDb, values },
            seeds,
            ..Scenario::default()
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(small(vec![], vec![1]).validate().is_err());
        assert!(small(vec![20.0], vec![]).validate().is_err());
        let mut s = small(vec![0.5], vec![1]);
        s.sweep.variable = SweepVariable::PilotOverhead;
        assert!(s.validate().is_ok());
        s.sweep.values = vec![1.5];
        assert!(s.validate().is_err());
        let mut s = small(vec![20.0], vec![1]);
        s.receiver = Receiver::DualPol;
        assert!(s.validate().is_err());
        assert!(Scenario::from_json(r#"{"seeds":[1],"sweep":{"variable":"osnr_db","values":[20]},"bogus":1}"#).is_err());
        assert!(Scenario::from_json(r#"{"seeds":[1],"sweep":{"variable":"enob","values":[6]}}"#).is_ok());
        assert!(matches!(Scenario::from_json("{"), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_values_land_in_the_right_field() {
        let mut s = small(vec![1.0], vec![1]);
        s.sweep.variable = SweepVariable::RetrievalDispersion;
        assert_eq!(s.at(1300.0).retrieval.retrieval_dispersion.total_ps_per_nm, 1300.0);
        s.sweep.variable = SweepVariable::LengthKm;
        assert_eq!(s.at(25.0).link.length_km, 25.0);
        s.sweep.variable = SweepVariable::Enob;
        assert_eq!(s.at(6.0).enob, Some(6.0));
        s.sweep.variable = SweepVariable::PilotOverhead;
        assert_eq!(s.at(0.1).pilot_overhead, 0.1);
    }

    #[test]
    fn rows_follow_config_order_and_are_deterministic() {
        let s = small(vec![20.0, 15.0], vec![3, 1]);
        let opts = RunOptions { threads: Some(2), ..RunOptions::default() };
        let r1 = run_scenario(&s, &opts).unwrap();
        let order: Vec<(f64, u64)> = r1.rows.iter().map(|r| (r.sweep_value, r.seed)).collect();
        assert_eq!(order, vec![(20.0, 3), (20.0, 1), (15.0, 3), (15.0, 1)]);
        let r2 = run_scenario(&s, &RunOptions { threads: Some(1), ..RunOptions::default() }).unwrap();
        let strip = |r: &ScenarioResult| -> String {
            let mut buf = Vec::new();
            let rows: Vec<ResultRow> = r
                .rows
                .iter()
                .cloned()
                .map(|mut x| {
                    x.wall_time_s = 0.0;
                    x
                })
                .collect();
            write_csv(&rows, &mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        assert_eq!(strip(&r1), strip(&r2));
    }

    #[test]
    fn reports_have_one_row_per_seed() {
        let s = small(vec![20.0], vec![1, 2]);
        let r = run_scenario(&s, &RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = emit_report(&r, dir.path()).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 3);
        assert_eq!(load_result(&json).unwrap(), r);
    }

    #[test]
    fn empty_report_creates_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let r = ScenarioResult { scenario: small(vec![20.0], vec![1]), rows: vec![] };
        assert!(emit_report(&r, &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn summary_pools_bits_and_finds_penalty() {
        let mut s = small(vec![10.0, 20.0], vec![1]);
        s.id = "p".into();
        let row = |v: f64, e: usize| ResultRow {
            scenario_id: "p".into(),
            seed: 1,
            sweep_value: v,
            ber: e as f64 / 1000.0,
            mean_a_err_db: -30.0,
            iterations: 1,
            converged: true,
            wall_time_s: 0.0,
            bit_errors: e,
            bits_counted: 1000,
            phase_within_0p1_rad: None,
            pdl_db: None,
            error: None,
        };
        let r = ScenarioResult { scenario: s, rows: vec![row(10.0, 100), row(20.0, 1)] };
        let sum = summarize(&r, 2e-2).unwrap();
        assert_eq!(sum.points[0].ber, 0.1);
        let req = sum.required_osnr_db.unwrap();
        assert!(req > 10.0 && req < 20.0);
        assert!((sum.penalty_db.unwrap() - (req - sum.theory_osnr_db.unwrap())).abs() < 1e-12);
    }

    #[test]
    fn threads_env_is_validated() {
        // Read-only check of the parser; the variable is not set in tests.
        if std::env::var(THREADS_ENV).is_err() {
            assert_eq!(threads_from_env().unwrap(), None);
        }
    }
}
