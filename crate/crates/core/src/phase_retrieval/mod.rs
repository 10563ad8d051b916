//! Modified Gerchberg-Saxton phase retrieval between an undispersed and a
//! dispersed intensity measurement.
//!
//! One iteration walks the estimate of the received field `s` through:
//!
//! 1. amplitude replacement with `sqrt(a)`,
//! 2. removal of the transmission-fiber dispersion,
//! 3. the pilot constraint at known symbol positions,
//! 4. re-application of the fiber dispersion,
//! 5. propagation through the retrieval dispersion `D`,
//! 6. amplitude replacement with `sqrt(b)`,
//! 7. back-propagation through `D^-1`,
//! 8. the rectangular spectral mask.
//!
//! Every `reset_period` iterations the phases of samples whose error
//! `A_err = (a - |s|^2)^2` exceeds `epsilon` are re-drawn uniformly on
//! `[-pi, pi)` to leave local minima.

mod b2;
mod engine;
mod multi;

pub use b2::{estimate_b2, B2Estimate, B2Search};
pub use engine::{
    apply_pilots, escape_local_minimum, gs_iteration, normalize_traces, replace_amplitude, run_retrieval,
    run_retrieval_from, PilotTargets, RetrievalProblem, RetrievalState, SpectralMask,
};
pub use multi::{run_multi_projection, ProjectionSet, Schedule};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channel::DispersionOperator;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotConstraint {
    /// Replace only the phase at pilot positions.
    #[default]
    PhaseOnly,
    /// Replace phase and amplitude at pilot positions.
    FullField,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseInit {
    /// Phases uniform on `[-pi, pi)`.
    #[default]
    RandomUniform,
    /// Caller-provided starting phases, one per sample.
    Provided(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Acceptable error level in normalized-intensity units.
    pub epsilon: f64,
    /// Iterations between local-minimum escapes (`M`).
    pub reset_period: usize,
    pub max_escapes: usize,
    /// Hard iteration cap; defaults to `reset_period * max_escapes`.
    pub max_iterations: Option<usize>,
    /// Terminate once the mean error falls below this; `None` uses
    /// `epsilon`. Noisy captures settle far above `1e-6`, so the default
    /// runs them for the whole budget.
    pub stop_below: Option<f64>,
    /// Dispersive element between the two detectors.
    pub retrieval_dispersion: DispersionOperator,
    /// Transmission-fiber dispersion removed before the pilot step.
    pub link_cd: DispersionOperator,
    /// Two-sided passband of the spectral constraint (Hz); `None` disables it.
    pub mask_bandwidth: Option<f64>,
    pub pilot_constraint: PilotConstraint,
    pub init: PhaseInit,
    /// Return the lowest-error state seen instead of the last one.
    pub keep_best: bool,
    /// Seed for initial and escape phases.
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            epsilon: 2e-3,
            reset_period: 500,
            max_escapes: 40,
            max_iterations: None,
            stop_below: Some(1e-6),
            retrieval_dispersion: DispersionOperator::new(650.0),
            link_cd: DispersionOperator::new(0.0),
            mask_bandwidth: Some(33e9),
            pilot_constraint: PilotConstraint::PhaseOnly,
            init: PhaseInit::RandomUniform,
            keep_best: true,
            seed: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.reset_period == 0 {
            return Err(Error::Config("reset_period must be at least 1".into()));
        }
        if self.retrieval_dispersion.is_identity() {
            return Err(Error::Config("retrieval dispersion must be nonzero".into()));
        }
        if let Some(bw) = self.mask_bandwidth {
            if !(bw > 0.0) {
                return Err(Error::Config("mask bandwidth must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn stop_threshold(&self) -> f64 {
        self.stop_below.unwrap_or(self.epsilon)
    }

    pub fn iteration_budget(&self) -> usize {
        self.max_iterations.unwrap_or(self.reset_period * self.max_escapes.max(1))
    }
}

/// Convergence diagnostics of one retrieval.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Mean `A_err` over all samples after every iteration (dB).
    pub mean_a_err_db: Vec<f64>,
    /// Iteration numbers (1-based) after which an escape was applied.
    pub escape_iterations: Vec<usize>,
    pub converged: bool,
    pub iterations_used: usize,
    pub escapes_done: usize,
    /// Final mean `A_err` (linear).
    pub final_mean_a_err: f64,
    /// Final `A_err` at symbol-center samples.
    pub symbol_a_err: Vec<f64>,
    /// Per-symbol `|delta theta|` (rad) against the supplied truth.
    pub delta_theta: Option<Vec<f64>>,
}

impl RetrievalReport {
    /// Escapes applied before or at `iteration`.
    pub fn escapes_at(&self, iteration: usize) -> usize {
        self.escape_iterations.partition_point(|&e| e <= iteration)
    }

    /// Fraction of symbols whose phase error is below `limit` (rad).
    pub fn fraction_within(&self, limit: f64) -> Option<f64> {
        self.delta_theta.as_ref().map(|d| d.iter().filter(|&&v| v < limit).count() as f64 / d.len().max(1) as f64)
    }

    /// Per-iteration diagnostics as CSV: `iteration,mean_a_err_db,escapes_done`.
    pub fn write_convergence_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,mean_a_err_db,escapes_done")?;
        for (i, v) in self.mean_a_err_db.iter().enumerate() {
            writeln!(out, "{},{},{}", i + 1, v, self.escapes_at(i + 1))?;
        }
        Ok(())
    }
}

/// One calibration point: the mean `A_err` an optimum-phase start settles
/// at for a given OSNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    /// `None` for a noiseless capture.
    pub osnr_db: Option<f64>,
    pub floor: f64,
}

/// Measured error floors and the rule that turns them into escape
/// thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonTable {
    pub points: Vec<CalibrationPoint>,
    /// Escape threshold is `epsilon_factor * floor`, clamped to
    /// `[epsilon_min, epsilon_max]`.
    pub epsilon_factor: f64,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    /// Stop level applied with the calibrated threshold. A retrieval from a
    /// random start settles below the optimum-start floor, so a stop level
    /// tied to the floor ends runs before stagnant pockets are escaped.
    pub stop_below: f64,
}

impl Default for EpsilonTable {
    fn default() -> Self {
        Self { points: Vec::new(), epsilon_factor: 6.0, epsilon_min: 1e-4, epsilon_max: 2e-3, stop_below: 1e-6 }
    }
}

impl EpsilonTable {
    /// Floor at `osnr_db`, log-interpolated between neighbouring points and
    /// held constant beyond the ends. `None` selects the noiseless entry.
    pub fn floor(&self, osnr_db: Option<f64>) -> Option<f64> {
        let Some(x) = osnr_db else {
            return self.points.iter().find(|p| p.osnr_db.is_none()).map(|p| p.floor);
        };
        let mut pts: Vec<(f64, f64)> =
            self.points.iter().filter_map(|p| p.osnr_db.map(|o| (o, p.floor.max(1e-300)))).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let first = *pts.first()?;
        let last = *pts.last()?;
        if x <= first.0 {
            return Some(first.1);
        }
        if x >= last.0 {
            return Some(last.1);
        }
        pts.windows(2).find(|w| x <= w[1].0).map(|w| {
            let t = (x - w[0].0) / (w[1].0 - w[0].0);
            (w[0].1.ln() * (1.0 - t) + w[1].1.ln() * t).exp()
        })
    }

    /// Escape threshold and stop level for `osnr_db`.
    pub fn thresholds(&self, osnr_db: Option<f64>) -> Option<(f64, f64)> {
        let f = self.floor(osnr_db)?;
        let eps = (self.epsilon_factor * f).clamp(self.epsilon_min, self.epsilon_max);
        Some((eps, self.stop_below))
    }

    /// Copy of `cfg` with the calibrated thresholds, or `cfg` unchanged when
    /// the table is empty.
    pub fn apply(&self, cfg: &RetrievalConfig, osnr_db: Option<f64>) -> RetrievalConfig {
        let mut out = cfg.clone();
        if let Some((eps, stop)) = self.thresholds(osnr_db) {
            out.epsilon = eps;
            out.stop_below = Some(stop);
        }
        out
    }
}

pub(crate) fn to_db(x: f64) -> f64 {
    10.0 * x.max(1e-300).log10()
}
