//! Complex baseband buffers and their on-disk form.
//!
//! Samples are held as `Complex<f64>` while processing. On disk a buffer is a
//! flat run of interleaved little-endian binary32 I/Q pairs, eight bytes per
//! complex sample.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::SAMPLE_RATE_HZ;

pub const BYTES_PER_SAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IqBuffer {
    samples: Vec<Complex64>,
}

impl IqBuffer {
    /// Wraps samples, rejecting NaN or infinite components.
    pub fn new(samples: Vec<Complex64>) -> Result<Self> {
        if let Some(i) = samples
            .iter()
            .position(|s| !(s.re.is_finite() && s.im.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self { samples })
    }

    /// For internal producers whose arithmetic cannot create non-finite values.
    pub(crate) fn from_vec(samples: Vec<Complex64>) -> Self {
        debug_assert!(samples.iter().all(|s| s.re.is_finite() && s.im.is_finite()));
        Self { samples }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn sample_rate_hz(&self) -> f64 {
        SAMPLE_RATE_HZ
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn slice(&self, start: usize, end: usize) -> IqBuffer {
        IqBuffer::from_vec(self.samples[start..end].to_vec())
    }

    /// Mean squared magnitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Round-trips every sample through binary32, as a file write then read
    /// would.
    pub fn to_f32_precision(&self) -> IqBuffer {
        IqBuffer::from_vec(
            self.samples
                .iter()
                .map(|s| Complex64::new(s.re as f32 as f64, s.im as f32 as f64))
                .collect(),
        )
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * BYTES_PER_SAMPLE);
        for s in &self.samples {
            out.extend_from_slice(&(s.re as f32).to_le_bytes());
            out.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % BYTES_PER_SAMPLE != 0 {
            return Err(Error::Length {
                context: "interleaved binary32 iq bytes",
                expected: bytes.len() / BYTES_PER_SAMPLE * BYTES_PER_SAMPLE,
                actual: bytes.len(),
            });
        }
        let samples = bytes
            .chunks_exact(BYTES_PER_SAMPLE)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        IqBuffer::new(samples)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_le_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_le_bytes(&bytes).map_err(|e| match e {
            Error::Length { .. } | Error::InvalidArgument(_) => Error::Format {
                path: path.to_path_buf(),
                detail: e.to_string(),
            },
            other => other,
        })
    }
}

impl From<IqBuffer> for Vec<Complex64> {
    fn from(b: IqBuffer) -> Self {
        b.samples
    }
}
