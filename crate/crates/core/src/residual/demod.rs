//! Matched-filter O-QPSK demodulation with per-symbol failure detection.

use crate::iq::IqBuffer;
use crate::waveform::chips::{symbols_to_bytes, CHIPS_PER_SYMBOL, CHIP_TABLE};
use crate::waveform::modulate::{PULSE, PULSE_LEN, SAMPLES_PER_CHIP, SAMPLES_PER_SYMBOL};
use crate::waveform::FRAME_SYMBOLS;

/// Minimum accepted gap between the best and second-best sequence
/// correlation, as a fraction of the ideal autocorrelation peak.
pub const DEFAULT_MARGIN_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct Demodulated {
    /// Accepted symbols, in order.
    pub symbols: Vec<u8>,
    /// Margin of each accepted symbol.
    pub margins: Vec<f64>,
    /// Index of the first symbol whose margin fell below the threshold.
    pub failed_at: Option<usize>,
}

impl Demodulated {
    pub fn bytes(&self) -> Vec<u8> {
        symbols_to_bytes(&self.symbols)
    }

    /// The weaker of each byte's two symbol margins.
    pub fn byte_confidence(&self) -> Vec<f64> {
        self.margins
            .chunks_exact(2)
            .map(|p| p[0].min(p[1]))
            .collect()
    }
}

/// Demodulates up to `max_symbols` symbols from `corrected[start_t0..]`.
///
/// Each chip is the pulse-matched correlation of its branch over the samples
/// `[8k, 8k + 16)` that are available. Each symbol's 32 soft chips are
/// correlated against the 16 spreading sequences; the margin is
/// `(best - second) / sum |soft chip|`, which is 1 minus the worst
/// cross-correlation ratio for a clean symbol and independent of amplitude.
/// A symbol needs `256` samples to be attempted. Decoding stops at the first
/// symbol whose margin is below `margin_threshold`.
pub fn oqpsk_demodulate(
    corrected: &IqBuffer,
    start_t0: usize,
    max_symbols: usize,
    margin_threshold: f64,
) -> Demodulated {
    let s = corrected.samples();
    let avail = s.len().saturating_sub(start_t0);
    let n_symbols = (avail / SAMPLES_PER_SYMBOL).min(max_symbols);
    let pulse = &*PULSE;
    let pulse_energy: f64 = pulse.iter().map(|p| p * p).sum();
    let table = &*CHIP_TABLE;

    let mut out = Demodulated {
        symbols: Vec::with_capacity(n_symbols),
        margins: Vec::with_capacity(n_symbols),
        failed_at: None,
    };
    let mut soft = [0.0f64; CHIPS_PER_SYMBOL];
    for sym in 0..n_symbols {
        let base = start_t0 + sym * SAMPLES_PER_SYMBOL;
        for (c, v) in soft.iter_mut().enumerate() {
            let chip_start = base + c * SAMPLES_PER_CHIP;
            let end = (chip_start + PULSE_LEN).min(s.len());
            let acc: f64 = s[chip_start..end]
                .iter()
                .zip(pulse.iter())
                .map(|(x, p)| if c % 2 == 0 { x.re * p } else { x.im * p })
                .sum();
            *v = acc / pulse_energy;
        }
        let energy: f64 = soft.iter().map(|v| v.abs()).sum();
        let (mut best, mut second, mut best_sym) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0u8);
        for (k, seq) in table.iter().enumerate() {
            let corr: f64 = seq.iter().zip(&soft).map(|(&c, v)| c as f64 * v).sum();
            if corr > best {
                second = best;
                best = corr;
                best_sym = k as u8;
            } else if corr > second {
                second = corr;
            }
        }
        let margin = if energy > 0.0 {
            (best - second) / energy
        } else {
            0.0
        };
        if margin < margin_threshold {
            out.failed_at = Some(sym);
            break;
        }
        out.symbols.push(best_sym);
        out.margins.push(margin);
    }
    out
}

/// Demodulates a whole frame with the default threshold.
pub fn demodulate_frame(corrected: &IqBuffer, start_t0: usize) -> Demodulated {
    oqpsk_demodulate(corrected, start_t0, FRAME_SYMBOLS, DEFAULT_MARGIN_THRESHOLD)
}
