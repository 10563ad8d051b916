use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::engine::{escape_local_minimum, finish_report, PilotTargets, RetrievalProblem};
use super::{to_db, RetrievalConfig, RetrievalReport};
use crate::channel::DispersionOperator;
use crate::error::{ensure_same_len, Error, Result};
use crate::waveform::{ComplexWaveform, IntensityTrace};

/// Order in which the dispersive elements are visited.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Move to the next element after every iteration.
    Scheme1,
    /// Stay `M` iterations on each element before moving on.
    Scheme2,
    /// Scheme 1 for half of the budget, then scheme 2.
    Combined,
}

/// Parallel dispersive elements `D_n = n * delta` for `n = 1..=N`, each with
/// its own dispersed measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub delta: DispersionOperator,
    pub traces: Vec<IntensityTrace>,
    pub schedule: Schedule,
}

impl ProjectionSet {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Dispersion of element `n` (1-based).
    pub fn element(&self, n: usize) -> DispersionOperator {
        DispersionOperator { total_ps_per_nm: n as f64 * self.delta.total_ps_per_nm, ..self.delta }
    }

    /// Element index (0-based) used at 0-based iteration `i` of a budget.
    pub fn element_at(&self, i: usize, budget: usize) -> usize {
        let n = self.len();
        let per_element = (budget / n).max(1);
        match self.schedule {
            Schedule::Scheme1 => i % n,
            Schedule::Scheme2 => (i / per_element).min(n - 1),
            Schedule::Combined => {
                let half = budget / 2;
                if i < half {
                    i % n
                } else {
                    ((i - half) / ((budget - half) / n).max(1)).min(n - 1)
                }
            }
        }
    }
}

/// Modified GS cycling over several dispersed planes. The phase retrieved
/// in one iteration seeds the next, whichever element it uses. The budget
/// `N * M` is `cfg.iteration_budget()`.
pub fn run_multi_projection(
    a: &IntensityTrace,
    ps: &ProjectionSet,
    cfg: &RetrievalConfig,
    pilots: PilotTargets,
    truth: Option<&ComplexWaveform>,
) -> Result<(ComplexWaveform, RetrievalReport)> {
    if ps.len() < 2 {
        return Err(Error::InvalidInput("multi-projection needs at least two elements".into()));
    }
    for t in &ps.traces {
        ensure_same_len(a.len(), t.len())?;
    }
    let planes: Vec<(DispersionOperator, &IntensityTrace)> =
        ps.traces.iter().enumerate().map(|(i, t)| (ps.element(i + 1), t)).collect();
    let scale = 1.0 / a.max().max(f64::MIN_POSITIVE);
    let mut problem = RetrievalProblem::with_projections(a, &planes, scale, cfg, pilots)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut state = problem.initial_state(&mut rng)?;
    let budget = cfg.iteration_budget();
    let mut report = RetrievalReport::default();
    for i in 0..budget {
        problem.iterate_plane(&mut state, ps.element_at(i, budget))?;
        let mean = state.mean_a_err();
        report.mean_a_err_db.push(to_db(mean));
        if mean < cfg.stop_threshold() {
            report.converged = true;
            break;
        }
        let it = i + 1;
        if it % cfg.reset_period == 0 && state.escapes_done < cfg.max_escapes && it < budget {
            escape_local_minimum(&mut state, cfg, &mut rng);
            report.escape_iterations.push(it);
        }
    }
    finish_report(&mut problem, &state, &mut report, truth)?;
    let samples: Vec<Complex64> = state.estimate;
    let wave = ComplexWaveform::new(samples, a.sample_rate, cfg.retrieval_dispersion.center_wavelength)?;
    Ok((wave, report))
}
