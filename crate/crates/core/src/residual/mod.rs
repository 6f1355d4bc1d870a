//! Residual extraction: isolate transmissions, align to the preamble, remove
//! carrier frequency and phase offsets by iterative regression, decode, and
//! subtract the rescaled ideal waveform.

pub mod align;
pub mod decode;
pub mod demod;
pub mod offsets;
pub mod phase;
pub mod segment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iq::IqBuffer;
use crate::waveform::{preamble_reference, FRAME_SAMPLES, SAMPLES_PER_BYTE};

pub use align::align_preamble;
pub use decode::{iterative_correct_decode, residual_signal, DecodeConfig, DecodedTransmission};
pub use demod::{oqpsk_demodulate, Demodulated};
pub use offsets::{apply_correction, fit_offsets, OffsetEstimate};
pub use phase::{phase_derivative, unwrap_phase, wrap_phase};
pub use segment::segment_transmissions;

/// Samples per residual transmission: the 34 data bytes.
pub const RESIDUAL_SAMPLES: usize = 17_408;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub threshold: f64,
    pub min_gap: usize,
    /// Samples searched for the preamble start, beginning `lead` samples
    /// before the detected segment start.
    pub search_window: usize,
    pub lead: usize,
    /// Slack added past the detected segment end before trimming to a
    /// multiple of two bytes.
    pub tail_slack: usize,
    pub decode: DecodeConfig,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            min_gap: 1000,
            search_window: 256,
            lead: 64,
            tail_slack: 256,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtractedResidual {
    /// Detected active range in the capture.
    pub segment: (usize, usize),
    /// Aligned frame start in the capture.
    pub start: usize,
    pub decoded: DecodedTransmission,
    pub residual: IqBuffer,
}

/// Outcome of one segment of a capture.
pub type SegmentResult = std::result::Result<ExtractedResidual, (usize, usize, Error)>;

/// Aligns, trims, decodes and extracts the residual of one detected segment.
pub fn extract_segment(
    stream: &IqBuffer,
    segment: (usize, usize),
    params: &PreprocessParams,
) -> Result<ExtractedResidual> {
    let reference = preamble_reference();
    let search_start = segment.0.saturating_sub(params.lead);
    let search_end = (segment.1 + params.tail_slack).min(stream.len());
    let window = stream.slice(search_start, search_end);
    let t0 = align_preamble(&window, &reference, params.search_window)?;
    let start = search_start + t0;
    let usable = (search_end - start) / SAMPLES_PER_BYTE * SAMPLES_PER_BYTE;
    if usable < FRAME_SAMPLES {
        return Err(Error::Length {
            context: "trimmed transmission",
            expected: FRAME_SAMPLES,
            actual: usable,
        });
    }
    let tx = stream.slice(start, start + usable);
    let decoded = iterative_correct_decode(&tx, &params.decode)?;
    let residual = residual_signal(&decoded)?;
    Ok(ExtractedResidual {
        segment,
        start,
        decoded,
        residual,
    })
}

/// Runs the whole chain over a capture stream, one result per segment.
pub fn extract_residuals(stream: &IqBuffer, params: &PreprocessParams) -> Result<Vec<SegmentResult>> {
    let segments = segment_transmissions(stream, params.threshold, params.min_gap)?;
    Ok(segments
        .into_iter()
        .map(|seg| extract_segment(stream, seg, params).map_err(|e| (seg.0, seg.1, e)))
        .collect())
}
