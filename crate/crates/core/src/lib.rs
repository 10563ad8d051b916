//! Full-field recovery of coherent optical signals from intensity-only
//! measurements.
//!
//! The receiver splits the incoming field, detects the intensity directly
//! and after a known dispersive element, and reconstructs the complex field
//! with a modified Gerchberg-Saxton iteration. The crate simulates the whole
//! link around that receiver: transmitter framing and pulse shaping, fiber
//! dispersion and polarization mixing, noise and digitizer limits, and a
//! conventional coherent DSP back end for BER counting.

pub mod channel;
pub mod dsp_backend;
pub mod error;
pub mod fft;
pub mod harness;
pub mod phase_retrieval;
pub mod pol_rx;
pub mod waveform;

pub use error::{Error, Result};
pub use num_complex::Complex64;
