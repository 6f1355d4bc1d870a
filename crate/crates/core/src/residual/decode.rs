//! Iterative offset correction and decoding, and the residual signal.

use serde::{Deserialize, Serialize};

use super::demod::{oqpsk_demodulate, DEFAULT_MARGIN_THRESHOLD};
use super::offsets::{apply_correction, fit_offsets, OffsetEstimate};
use crate::error::{Error, Result};
use crate::iq::IqBuffer;
use crate::waveform::chips::{bytes_to_symbols, checksum, symbols_to_bytes, symbols_to_chips};
use crate::waveform::modulate::{modulate_chips, SAMPLES_PER_SYMBOL};
use crate::waveform::{
    FRAME_LEN, FRAME_SAMPLES, FRAME_SYMBOLS, PAYLOAD_LEN, PREAMBLE, PREAMBLE_SAMPLES,
    PREAMBLE_SYMBOLS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_iterations: usize,
    pub margin_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            margin_threshold: DEFAULT_MARGIN_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTransmission {
    /// Whole frame: preamble, payload, checksum.
    pub bytes: Vec<u8>,
    /// Offset-corrected measurement over the frame.
    pub corrected: IqBuffer,
    /// Regenerated ideal frame scaled by `amplitude_scale`.
    pub ideal_scaled: IqBuffer,
    pub amplitude_scale: f64,
    /// Decode passes performed.
    pub iterations: usize,
    /// Estimate from the final full-frame fit.
    pub estimate: OffsetEstimate,
}

impl DecodedTransmission {
    pub fn payload(&self) -> [u8; PAYLOAD_LEN] {
        let start = PREAMBLE.len();
        self.bytes[start..start + PAYLOAD_LEN]
            .try_into()
            .expect("frame has a full payload")
    }
}

fn symbols_baseband(symbols: &[u8]) -> IqBuffer {
    modulate_chips(&symbols_to_chips(symbols))
}

/// Length of the prefix of `symbols` that agrees with the fixed preamble.
fn preamble_consistent(symbols: &[u8], expected: &[u8]) -> usize {
    symbols
        .iter()
        .zip(expected)
        .take_while(|(a, b)| a == b)
        .count()
}

/// Decodes a preamble-aligned transmission.
///
/// The first estimate comes from regressing against the known preamble. Each
/// pass corrects the whole buffer, decodes until the demodulator's margin test
/// fails, and refits over the longer span of correctly decoded symbols. Once
/// the whole frame decodes with a valid checksum, a last fit over the full
/// frame yields the output estimate, and the attenuation is the least-squares
/// scale of `|corrected|` onto `|ideal|`.
pub fn iterative_correct_decode(tx: &IqBuffer, cfg: &DecodeConfig) -> Result<DecodedTransmission> {
    if tx.len() < PREAMBLE_SAMPLES {
        return Err(Error::Unrecoverable {
            iterations: 0,
            decoded_symbols: 0,
        });
    }
    let preamble_symbols = bytes_to_symbols(&PREAMBLE);
    let reference = symbols_baseband(&preamble_symbols);
    let mut est = fit_offsets(&tx.slice(0, PREAMBLE_SAMPLES), &reference)?;
    let mut best_decoded = 0usize;

    for iteration in 1..=cfg.max_iterations {
        let corrected = apply_correction(tx, &est);
        let demod = oqpsk_demodulate(&corrected, 0, FRAME_SYMBOLS, cfg.margin_threshold);
        let mut symbols = demod.symbols;
        let good_preamble = preamble_consistent(&symbols, &preamble_symbols);
        if good_preamble < PREAMBLE_SYMBOLS.min(symbols.len()) {
            symbols.truncate(good_preamble);
        }
        best_decoded = best_decoded.max(symbols.len());

        if symbols.len() == FRAME_SYMBOLS {
            let bytes = symbols_to_bytes(&symbols);
            let data = &bytes[PREAMBLE.len()..];
            if checksum(&data[..PAYLOAD_LEN]) == data[PAYLOAD_LEN..] {
                return finish(tx, bytes, iteration);
            }
        }

        // Refit over everything decoded so far (the preamble at minimum).
        let span = symbols.len().max(PREAMBLE_SYMBOLS);
        let ideal = if symbols.len() >= PREAMBLE_SYMBOLS {
            symbols_baseband(&symbols[..span])
        } else {
            reference.clone()
        };
        let span_samples = span * SAMPLES_PER_SYMBOL;
        est = fit_offsets(&tx.slice(0, span_samples), &ideal)?;
    }
    Err(Error::Unrecoverable {
        iterations: cfg.max_iterations,
        decoded_symbols: best_decoded,
    })
}

fn finish(tx: &IqBuffer, bytes: Vec<u8>, iterations: usize) -> Result<DecodedTransmission> {
    debug_assert_eq!(bytes.len(), FRAME_LEN);
    let ideal = symbols_baseband(&bytes_to_symbols(&bytes));
    let measured = tx.slice(0, FRAME_SAMPLES);
    let estimate = fit_offsets(&measured, &ideal)?;
    let corrected = apply_correction(&measured, &estimate);
    let (num, den) = corrected
        .samples()
        .iter()
        .zip(ideal.samples())
        .fold((0.0, 0.0), |(n, d), (c, a)| {
            (n + c.norm() * a.norm(), d + a.norm_sqr())
        });
    let amplitude_scale = num / den;
    let ideal_scaled = IqBuffer::from_vec(
        ideal
            .samples()
            .iter()
            .map(|a| a * amplitude_scale)
            .collect(),
    );
    Ok(DecodedTransmission {
        bytes,
        corrected,
        ideal_scaled,
        amplitude_scale,
        iterations,
        estimate,
    })
}

/// `corrected - amplitude_scale * ideal` over the 34 data bytes
/// (17,408 samples).
pub fn residual_signal(dec: &DecodedTransmission) -> Result<IqBuffer> {
    let (c, a) = (dec.corrected.samples(), dec.ideal_scaled.samples());
    if c.len() != a.len() || c.len() < FRAME_SAMPLES {
        return Err(Error::Length {
            context: "residual inputs",
            expected: FRAME_SAMPLES,
            actual: c.len().min(a.len()),
        });
    }
    Ok(IqBuffer::from_vec(
        c[PREAMBLE_SAMPLES..FRAME_SAMPLES]
            .iter()
            .zip(&a[PREAMBLE_SAMPLES..FRAME_SAMPLES])
            .map(|(c, a)| c - a)
            .collect(),
    ))
}
