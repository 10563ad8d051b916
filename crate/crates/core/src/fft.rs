//! Thin wrappers around `rustfft` with normalized inverse transforms.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Forward/inverse transform pair of a fixed length with its own scratch.
///
/// The inverse is scaled by `1/n` so that `inverse(forward(x)) == x`.
#[derive(Clone)]
pub struct FftPair {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl std::fmt::Debug for FftPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPair").field("n", &self.n).finish()
    }
}

impl FftPair {
    pub fn new(n: usize) -> Self {
        let (fwd, inv) = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            (p.plan_fft_forward(n), p.plan_fft_inverse(n))
        });
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self { n, fwd, inv, scratch: vec![Complex64::new(0.0, 0.0); len] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&mut self, buf: &mut [Complex64]) {
        self.fwd.process_with_scratch(buf, &mut self.scratch);
    }

    /// Unnormalized inverse; callers fold `1/n` into their filters.
    pub fn inverse_raw(&mut self, buf: &mut [Complex64]) {
        self.inv.process_with_scratch(buf, &mut self.scratch);
    }

    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        self.inverse_raw(buf);
        let scale = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }

    /// Multiply the spectrum of `buf` by `filter` in place.
    pub fn filter(&mut self, buf: &mut [Complex64], filter: &[Complex64]) {
        self.forward(buf);
        buf.iter_mut().zip(filter).for_each(|(v, h)| *v *= h);
        self.inverse(buf);
    }
}

pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    FftPair::new(x.len()).forward(&mut buf);
    buf
}

pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    FftPair::new(x.len()).inverse(&mut buf);
    buf
}

/// Frequency (Hz) of each FFT bin in standard order.
pub fn bin_frequencies(n: usize, sample_rate: f64) -> Vec<f64> {
    let df = sample_rate / n as f64;
    (0..n).map(|k| if k <= (n - 1) / 2 { k as f64 * df } else { (k as f64 - n as f64) * df }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let x: Vec<Complex64> = (0..37).map(|k| Complex64::new((k as f64).sin(), (0.3 * k as f64).cos())).collect();
        let y = ifft(&fft(&x));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn bin_frequencies_are_centered() {
        let f = bin_frequencies(4, 4.0);
        assert_eq!(f, vec![0.0, 1.0, -2.0, -1.0]);
        let f = bin_frequencies(5, 5.0);
        assert_eq!(f, vec![0.0, 1.0, 2.0, -2.0, -1.0]);
    }
}
