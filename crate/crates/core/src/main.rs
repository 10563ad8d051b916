use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prism::channel::DispersionOperator;
use prism::harness::{
    emit_report, load_result, run_scenario, single_pol_config, single_pol_pilot_gain, summarize, theory_curve,
    write_theory_csv, Receiver, RunOptions, Scenario,
};
use prism::phase_retrieval::{run_retrieval, PilotTargets, RetrievalConfig};
use prism::pol_rx::{joint_estimation_loop, write_estimate, QuadIntensityCapture};
use prism::waveform::{build_frame, read_header, read_intensities, write_waveforms, Constellation, Modulation};
use prism::{Error, Result};

#[derive(Parser)]
#[command(name = "prism", version, about = "Field recovery from intensity-only captures")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario end to end and write `<id>.csv` and `<id>.json`.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the scenario's `outputs.dir`, then `.`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides PRISM_THREADS.
        #[arg(long)]
        threads: Option<usize>,
        /// Write per-iteration mean A_err CSVs next to the report.
        #[arg(long)]
        trace_convergence: bool,
        /// Write the detected intensity traces of every point.
        #[arg(long)]
        save_captures: bool,
    },
    /// Retrieve a field from stored undispersed (`a`) and dispersed (`b`)
    /// intensity traces.
    Retrieve {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Single-channel intensity sidecar describing both traces.
        #[arg(long)]
        meta: PathBuf,
        /// Retrieval configuration (JSON). Defaults to the scenario's
        /// settings, or the library defaults without a scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario whose frame supplies the pilots and link dispersion;
        /// needs `--seed`.
        #[arg(long, requires = "seed")]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        trace_convergence: bool,
    },
    /// Estimate the 2x2 channel from a dual-polarization training capture.
    EstimateChannel {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        a_x: PathBuf,
        #[arg(long)]
        b_x: PathBuf,
        #[arg(long)]
        a_y: PathBuf,
        #[arg(long)]
        b_y: PathBuf,
        /// Dual-polarization scenario describing the frame and receiver.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        trace_convergence: bool,
    },
    /// Emit the theoretical BER-versus-OSNR curve as CSV.
    Theory {
        #[arg(long, default_value = "qpsk")]
        modulation: String,
        #[arg(long, default_value_t = 30e9)]
        baud: f64,
        #[arg(long, default_value_t = 1)]
        pols: usize,
        #[arg(long, default_value_t = 0.0)]
        osnr_min: f64,
        #[arg(long, default_value_t = 30.0)]
        osnr_max: f64,
        #[arg(long, default_value_t = 0.5)]
        step: f64,
        /// Standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pool a result file per sweep value and locate the target BER.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 2e-2)]
        target_ber: f64,
        /// Directory for `<id>_summary.json` and `<id>_summary.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Io(_) => 3,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parse_modulation(s: &str) -> Result<Modulation> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| Error::Config(format!("unknown modulation {s:?}")))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate { config, out, threads, trace_convergence, save_captures } => {
            let s = Scenario::load(&config)?;
            let dir = out.or_else(|| s.outputs.dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            let opts = RunOptions { threads, artifact_dir: Some(dir.clone()), trace_convergence, save_captures };
            let result = run_scenario(&s, &opts)?;
            let (csv, json) = emit_report(&result, &dir)?;
            let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} rows ({failed} failed) -> {}, {}", result.rows.len(), csv.display(), json.display());
            Ok(())
        }
        Cmd::Retrieve { a, b, meta, config, scenario, seed, out, trace_convergence } => {
            let scenario = scenario.map(|p| Scenario::load(&p)).transpose()?;
            let seed = seed.unwrap_or(0);
            let mut cfg: RetrievalConfig = match (&config, &scenario) {
                (Some(p), _) => read_json(p)?,
                (None, Some(s)) => single_pol_config(s, seed),
                (None, None) => RetrievalConfig::default(),
            };
            if let Some(s) = &scenario {
                cfg.link_cd = s.link.dispersion();
                cfg.seed = seed;
            }
            cfg.validate()?;
            let a = read_intensities(&meta, &a)?.remove(0);
            let b = read_intensities(&meta, &b)?.remove(0);
            let pilots = match &scenario {
                Some(s) => {
                    let frame = build_frame(seed, &s.frame_spec(), &Constellation::new(s.modulation), 1)?;
                    PilotTargets::from_frame(&frame, 0, single_pol_pilot_gain(&a, s.rolloff))
                }
                None => PilotTargets::none(2),
            };
            let (field, report) = run_retrieval(&a, &b, &cfg, pilots, None)?;
            std::fs::create_dir_all(&out)?;
            write_waveforms(&[field], &out.join("field.json"), &out.join("field.bin"))?;
            write_json(&out.join("report.json"), &report)?;
            if trace_convergence {
                report.write_convergence_csv(BufWriter::new(File::create(out.join("convergence.csv"))?))?;
            }
            println!(
                "{} iterations, mean A_err {:.3e}, converged {}",
                report.iterations_used, report.final_mean_a_err, report.converged
            );
            Ok(())
        }
        Cmd::EstimateChannel { meta, a_x, b_x, a_y, b_y, scenario, seed, out, trace_convergence } => {
            let s = Scenario::load(&scenario)?;
            if s.receiver != Receiver::DualPol {
                return Err(Error::Config("estimate-channel needs a dual_pol scenario".into()));
            }
            let h = read_header(&meta)?;
            let rd = s.dual_pol.retrieval.retrieval_dispersion.with_wavelength(h.center_wavelength);
            let trace = |p: &Path| read_intensities(&meta, p).map(|mut v| v.remove(0));
            let cap = QuadIntensityCapture::new(trace(&a_x)?, trace(&b_x)?, trace(&a_y)?, trace(&b_y)?, [rd, rd])?;
            let frame = build_frame(seed, &s.frame_spec(), &Constellation::new(s.modulation), 2)?;
            let mut cfg = s.dual_pol.retrieval.clone();
            cfg.link_cd = DispersionOperator::fiber(s.link.length_km, s.link.ps_per_nm_per_km);
            cfg.seed = seed;
            let est = joint_estimation_loop(&cap, &frame, &cfg, &s.dual_pol.joint)?;
            std::fs::create_dir_all(&out)?;
            write_estimate(&est.estimate, &out.join("estimate.json"), &out.join("estimate.bin"))?;
            let mut w = BufWriter::new(File::create(out.join("pdl.csv"))?);
            writeln!(w, "iteration,pdl_db")?;
            for e in &est.history {
                writeln!(w, "{},{}", e.iteration, e.pdl_db)?;
            }
            w.flush()?;
            if trace_convergence {
                for (k, r) in est.reports.iter().enumerate() {
                    for (pol, rep) in ["x", "y"].iter().zip(r) {
                        let f = File::create(out.join(format!("pass{}_{pol}_convergence.csv", k + 1)))?;
                        rep.write_convergence_csv(BufWriter::new(f))?;
                    }
                }
            }
            println!("PDL {:.3} dB after {} passes", est.estimate.pdl_db, est.history.len());
            Ok(())
        }
        Cmd::Theory { modulation, baud, pols, osnr_min, osnr_max, step, out } => {
            let m = parse_modulation(&modulation)?;
            if !(step > 0.0) || osnr_max < osnr_min || !(1..=2).contains(&pols) {
                return Err(Error::Config("need step > 0, osnr_max >= osnr_min and 1 or 2 pols".into()));
            }
            let n = ((osnr_max - osnr_min) / step + 1e-9).floor() as usize + 1;
            let grid: Vec<f64> = (0..n).map(|i| osnr_min + i as f64 * step).collect();
            let curve = theory_curve(m, baud, pols, &grid);
            match out {
                Some(p) => write_theory_csv(&curve, BufWriter::new(File::create(p)?)),
                None => write_theory_csv(&curve, std::io::stdout().lock()),
            }
        }
        Cmd::Report { results, target_ber, out } => {
            let result = load_result(&results)?;
            let sum = summarize(&result, target_ber)?;
            let mut table = Vec::new();
            writeln!(table, "sweep_value,ber,bit_errors,bits_counted,failed")?;
            for p in &sum.points {
                writeln!(table, "{},{},{},{},{}", p.sweep_value, p.ber, p.bit_errors, p.bits_counted, p.failed)?;
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_json(&dir.join(format!("{}_summary.json", sum.scenario_id)), &sum)?;
                std::fs::write(dir.join(format!("{}_summary.csv", sum.scenario_id)), &table)?;
            }
            std::io::stdout().write_all(&table)?;
            if let (Some(r), Some(t), Some(p)) = (sum.required_osnr_db, sum.theory_osnr_db, sum.penalty_db) {
                println!("BER {target_ber:e} at {r:.2} dB OSNR; theory {t:.2} dB; penalty {p:.2} dB");
            }
            Ok(())
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, v)?;
    w.flush()?;
    Ok(())
}
