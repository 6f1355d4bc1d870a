//! Synthetic ZigBee transmitters.
//!
//! A transmission is five preamble bytes (four zeros and the 0xA7 delimiter),
//! a 32-byte payload and a 2-byte frame check sequence, spread to chips and
//! modulated as half-sine O-QPSK. 39 bytes make 2496 chips and 19,968 samples.

pub mod channel;
pub mod chips;
pub mod modulate;
pub mod profile;
pub mod synth;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use channel::{add_noise, awgn};
pub use modulate::{modulate_chips, oqpsk_baseband, SAMPLES_PER_BYTE, SAMPLES_PER_SYMBOL};
pub use profile::{apply_impairments, DeviceProfile, ImpairmentScale};
pub use synth::{synth_dataset, GenConfig, ManifestRecord};

pub const PAYLOAD_LEN: usize = 32;
pub const CHECKSUM_LEN: usize = 2;
pub const PREAMBLE: [u8; 5] = [0x00, 0x00, 0x00, 0x00, 0xA7];
/// Payload plus checksum.
pub const DATA_LEN: usize = PAYLOAD_LEN + CHECKSUM_LEN;
pub const FRAME_LEN: usize = PREAMBLE.len() + DATA_LEN;
pub const FRAME_SYMBOLS: usize = FRAME_LEN * chips::SYMBOLS_PER_BYTE;
pub const PREAMBLE_SYMBOLS: usize = PREAMBLE.len() * chips::SYMBOLS_PER_BYTE;
pub const FRAME_SAMPLES: usize = FRAME_LEN * SAMPLES_PER_BYTE;
pub const PREAMBLE_SAMPLES: usize = PREAMBLE.len() * SAMPLES_PER_BYTE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthLabels {
    pub omega_o: f64,
    pub phi_o: f64,
    pub device_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub payload: [u8; PAYLOAD_LEN],
    pub checksum: [u8; CHECKSUM_LEN],
    pub preamble: [u8; 5],
    pub chips: Vec<i8>,
    pub truth: TruthLabels,
}

impl Transmission {
    /// Preamble, payload and checksum in transmission order.
    pub fn frame_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_LEN);
        out.extend_from_slice(&self.preamble);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.checksum);
        out
    }
}

/// Frames `payload` and draws the per-transmission carrier offsets from the
/// device's distributions: frequency Gaussian, phase uniform on `[-pi, pi)`.
pub fn build_transmission(
    payload: &[u8],
    profile: &DeviceProfile,
    rng_seed: u64,
) -> Result<Transmission> {
    let payload: [u8; PAYLOAD_LEN] = payload.try_into().map_err(|_| Error::Length {
        context: "transmission payload",
        expected: PAYLOAD_LEN,
        actual: payload.len(),
    })?;
    let mut rng = seed::rng(rng_seed, &[seed::stream::TRANSMISSION]);
    let omega_o = if profile.freq_offset_std > 0.0 {
        Normal::new(profile.freq_offset_mean, profile.freq_offset_std)
            .expect("std is positive and finite")
            .sample(&mut rng)
    } else {
        profile.freq_offset_mean
    };
    let phi_o = rng.random_range(-PI..PI);
    let checksum = chips::checksum(&payload);
    let mut tx = Transmission {
        payload,
        checksum,
        preamble: PREAMBLE,
        chips: Vec::new(),
        truth: TruthLabels {
            omega_o,
            phi_o,
            device_id: profile.device_id,
        },
    };
    tx.chips = chips::bytes_to_chips(&tx.frame_bytes());
    Ok(tx)
}

/// Ideal baseband of the preamble alone, the alignment reference.
pub fn preamble_reference() -> crate::IqBuffer {
    modulate_chips(&chips::bytes_to_chips(&PREAMBLE))
}
