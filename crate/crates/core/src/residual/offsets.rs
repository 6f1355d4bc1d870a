use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::phase::{unwrap_phase, wrap_phase};
use crate::error::{Error, Result};
use crate::iq::IqBuffer;

/// Carrier offsets recovered by regressing the unwrapped phase difference
/// between a measured and an ideal signal on the sample index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// rad/sample
    pub omega: f64,
    /// rad, in `[-pi, pi)`
    pub phi: f64,
    pub fit_span_samples: usize,
    /// RMS of the regression residual, rad.
    pub residual_rms: f64,
    /// Standard error of `omega`.
    pub omega_std_err: f64,
}

impl OffsetEstimate {
    pub fn zero() -> Self {
        Self {
            omega: 0.0,
            phi: 0.0,
            fit_span_samples: 0,
            residual_rms: 0.0,
            omega_std_err: 0.0,
        }
    }
}

/// Ordinary least squares of `unwrap(arg c(t) - arg a(t))` against `t`.
/// Samples where either signal has zero magnitude are left out.
pub fn fit_offsets(measured: &IqBuffer, ideal: &IqBuffer) -> Result<OffsetEstimate> {
    if measured.len() != ideal.len() {
        return Err(Error::Length {
            context: "offset fit (ideal vs measured)",
            expected: ideal.len(),
            actual: measured.len(),
        });
    }
    let (ts, raw): (Vec<f64>, Vec<f64>) = measured
        .samples()
        .iter()
        .zip(ideal.samples())
        .enumerate()
        .filter(|(_, (m, a))| m.norm_sqr() > 0.0 && a.norm_sqr() > 0.0)
        .map(|(t, (m, a))| (t as f64, (m * a.conj()).arg()))
        .unzip();
    let n = ts.len();
    if n < 2 {
        return Err(Error::DegenerateFit(n));
    }
    let ys = unwrap_phase(&raw);

    let nf = n as f64;
    let t_mean = ts.iter().sum::<f64>() / nf;
    let y_mean = ys.iter().sum::<f64>() / nf;
    let (mut stt, mut sty) = (0.0, 0.0);
    for (t, y) in ts.iter().zip(&ys) {
        let dt = t - t_mean;
        stt += dt * dt;
        sty += dt * (y - y_mean);
    }
    let omega = sty / stt;
    let intercept = y_mean - omega * t_mean;
    let sse: f64 = ts
        .iter()
        .zip(&ys)
        .map(|(t, y)| {
            let r = y - (omega * t + intercept);
            r * r
        })
        .sum();
    let residual_rms = (sse / nf).sqrt();
    let omega_std_err = if n > 2 {
        (sse / (nf - 2.0) / stt).sqrt()
    } else {
        0.0
    };
    Ok(OffsetEstimate {
        omega,
        phi: wrap_phase(intercept),
        fit_span_samples: measured.len(),
        residual_rms,
        omega_std_err,
    })
}

/// Multiplies sample `t` by `exp(-i (omega t + phi))`.
pub fn apply_correction(signal: &IqBuffer, est: &OffsetEstimate) -> IqBuffer {
    rotate(signal, -est.omega, -est.phi)
}

pub(crate) fn rotate(signal: &IqBuffer, omega: f64, phi: f64) -> IqBuffer {
    if omega == 0.0 && phi == 0.0 {
        return signal.clone();
    }
    IqBuffer::from_vec(
        signal
            .samples()
            .iter()
            .enumerate()
            .map(|(t, x)| x * Complex64::from_polar(1.0, omega * t as f64 + phi))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{apply_impairments, build_transmission, oqpsk_baseband, DeviceProfile};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ideal() -> IqBuffer {
        let tx = build_transmission(&[0x3Cu8; 32], &DeviceProfile::ideal(0), 8).unwrap();
        oqpsk_baseband(&tx)
    }

    #[test]
    fn identical_signals_fit_zero() {
        let a = ideal();
        let est = fit_offsets(&a, &a).unwrap();
        assert!(est.omega.abs() < 1e-10);
        assert!(est.phi.abs() < 1e-10);
    }

    #[test]
    fn recovers_injected_rotation() {
        let a = ideal();
        let m = apply_impairments(&a, &DeviceProfile::ideal(0), 5e-4, 0.7, 1.0);
        let est = fit_offsets(&m, &a).unwrap();
        assert!((est.omega - 5e-4).abs() < 1e-7, "omega {}", est.omega);
        assert!((est.phi - 0.7).abs() < 1e-4, "phi {}", est.phi);
    }

    #[test]
    fn phase_jitter_within_three_standard_errors() {
        let a = ideal();
        let mut rng = crate::seed::rng(17, &[]);
        for _ in 0..20 {
            let m = IqBuffer::from_vec(
                a.samples()
                    .iter()
                    .enumerate()
                    .map(|(t, x)| {
                        let d: f64 = rng.sample::<f64, _>(StandardNormal) * 0.01;
                        x * Complex64::from_polar(1.0, 2e-4 * t as f64 - 1.0 + d)
                    })
                    .collect(),
            );
            let est = fit_offsets(&m, &a).unwrap();
            assert!((est.omega - 2e-4).abs() <= 3.0 * est.omega_std_err);
            assert!((est.residual_rms - 0.01).abs() < 0.002);
        }
    }

    #[test]
    fn degenerate_span() {
        let z = IqBuffer::zeros(10);
        assert!(matches!(fit_offsets(&z, &z), Err(Error::DegenerateFit(0))));
        let a = ideal();
        assert!(fit_offsets(&a.slice(0, 3), &a.slice(0, 4)).is_err());
    }

    #[test]
    fn correction_identity_and_inverse() {
        let a = ideal();
        assert_eq!(apply_correction(&a, &OffsetEstimate::zero()), a);
        let est = OffsetEstimate {
            omega: 3e-3,
            phi: -2.0,
            ..OffsetEstimate::zero()
        };
        let back = rotate(&apply_correction(&a, &est), est.omega, est.phi);
        let err: f64 = a
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            / a.len() as f64;
        assert!(err.sqrt() < 1e-12);
    }

    #[test]
    fn corrected_signal_has_no_residual_slope() {
        let a = ideal();
        let m = apply_impairments(&a, &DeviceProfile::ideal(0), -1.3e-3, 2.2, 0.8);
        let fit = fit_offsets(&m, &a).unwrap();
        let truth = OffsetEstimate {
            omega: -1.3e-3,
            phi: 2.2,
            ..OffsetEstimate::zero()
        };
        let after = fit_offsets(&apply_correction(&m, &truth), &a).unwrap();
        assert!(after.omega.abs() <= 3.0 * fit.omega_std_err.max(1e-12));
    }
}
