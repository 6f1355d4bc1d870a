//! Half-sine O-QPSK at 2 Mchip/s sampled at 16 MS/s.
//!
//! Even chips ride the I branch and odd chips the Q branch. Each chip is a
//! half-sine pulse spanning two chip periods (16 samples); the Q branch lags
//! the I branch by one chip period (8 samples). Chip `k` therefore occupies
//! samples `[8k, 8k + 16)` on its branch, and a byte spans 512 samples.

use std::sync::LazyLock;

use num_complex::Complex64;

use super::chips::CHIPS_PER_BYTE;
use super::Transmission;
use crate::iq::IqBuffer;

pub const SAMPLES_PER_CHIP: usize = 8;
pub const PULSE_LEN: usize = 2 * SAMPLES_PER_CHIP;
pub const SAMPLES_PER_SYMBOL: usize = 32 * SAMPLES_PER_CHIP;
pub const SAMPLES_PER_BYTE: usize = CHIPS_PER_BYTE * SAMPLES_PER_CHIP;

/// Unit-peak half-sine pulse, `sin(pi n / 16)`.
pub static PULSE: LazyLock<[f64; PULSE_LEN]> = LazyLock::new(|| {
    let mut p = [0.0; PULSE_LEN];
    for (n, v) in p.iter_mut().enumerate() {
        *v = (std::f64::consts::PI * n as f64 / PULSE_LEN as f64).sin();
    }
    p
});

/// Modulates bipolar chips into exactly `8 * chips.len()` samples. The tail
/// of the final Q pulse beyond that length is cut.
pub fn modulate_chips(chips: &[i8]) -> IqBuffer {
    let len = chips.len() * SAMPLES_PER_CHIP;
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    let pulse = &*PULSE;
    for (k, &c) in chips.iter().enumerate() {
        let start = k * SAMPLES_PER_CHIP;
        let amp = c as f64;
        let end = (start + PULSE_LEN).min(len);
        for (n, s) in out[start..end].iter_mut().enumerate() {
            if k % 2 == 0 {
                s.re += amp * pulse[n];
            } else {
                s.im += amp * pulse[n];
            }
        }
    }
    IqBuffer::from_vec(out)
}

pub fn oqpsk_baseband(tx: &Transmission) -> IqBuffer {
    modulate_chips(&tx.chips)
}
