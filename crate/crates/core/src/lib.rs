//! RF fingerprinting of ZigBee transmitters with a photonic-inspired recurrent
//! network.
//!
//! The crate is organised along the processing chain:
//!
//! * [`waveform`] synthesises IEEE 802.15.4 O-QPSK transmissions carrying
//!   device-specific impairments.
//! * [`residual`] segments a capture, removes carrier frequency and phase
//!   offsets by iterative regression and emits the residual error signal.
//! * [`dataset`] slices residuals into 64x32 data units, splits and normalises
//!   them.
//! * [`model`] holds the PRNN-CNN classifier and the NRL CNN baseline.
//! * [`train`] trains either model with BPTT and Adam.
//! * [`hwmodel`] estimates MACs, energy and pipeline timing, and emulates
//!   fixed-point inference.
//! * [`eval`] produces accuracy, confusion, segment-count and noise reports.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod hwmodel;
pub mod iq;
pub mod model;
pub mod residual;
pub mod seed;
pub mod train;
pub mod waveform;

pub use error::{Error, Result};
pub use iq::IqBuffer;

/// Baseband sample rate of every buffer handled by the crate.
pub const SAMPLE_RATE_HZ: f64 = 16e6;
