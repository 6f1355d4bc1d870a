use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::iq::IqBuffer;

/// Wraps into `[-pi, pi)`.
pub fn wrap_phase(x: f64) -> f64 {
    let w = (x + PI).rem_euclid(TAU) - PI;
    // rem_euclid can land exactly on TAU for tiny negative inputs.
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Per-sample phase increment `arg(x[t+1]) - arg(x[t])` mapped into
/// `(-pi, pi]`. Elements touching a zero-magnitude sample are `None`.
pub fn phase_derivative(signal: &IqBuffer) -> Result<Vec<Option<f64>>> {
    let s = signal.samples();
    if s.len() < 2 {
        return Err(Error::Length {
            context: "phase derivative input",
            expected: 2,
            actual: s.len(),
        });
    }
    Ok(s.windows(2)
        .map(|w| {
            if w[0].norm_sqr() == 0.0 || w[1].norm_sqr() == 0.0 {
                None
            } else {
                Some((w[1] * w[0].conj()).arg())
            }
        })
        .collect())
}

/// Removes `2 pi` jumps so that successive differences fall in `(-pi, pi]`.
pub fn unwrap_phase(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for &p in phases {
        if let Some(q) = prev {
            let mut d = p - q;
            while d > PI {
                d -= TAU;
                offset -= TAU;
            }
            while d <= -PI {
                d += TAU;
                offset += TAU;
            }
        }
        out.push(p + offset);
        prev = Some(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn tone(omega: f64, len: usize) -> IqBuffer {
        IqBuffer::from_vec((0..len).map(|t| Complex64::from_polar(1.0, omega * t as f64)).collect())
    }

    #[test]
    fn tone_derivative() {
        for d in phase_derivative(&tone(0.1, 500)).unwrap() {
            assert!((d.unwrap() - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn fast_tone_is_not_aliased() {
        let d = phase_derivative(&tone(3.0, 100)).unwrap();
        for (t, v) in d.iter().enumerate() {
            let reference = wrap_phase(3.0 * (t + 1) as f64 - 3.0 * t as f64);
            assert!((v.unwrap() - reference).abs() < 1e-9);
            assert!((v.unwrap() - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_real_signal() {
        let x = IqBuffer::from_vec(vec![Complex64::new(2.0, 0.0); 10]);
        assert!(phase_derivative(&x).unwrap().iter().all(|d| *d == Some(0.0)));
    }

    #[test]
    fn zero_sample_is_flagged() {
        let x = IqBuffer::from_vec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
        ]);
        let d = phase_derivative(&x).unwrap();
        assert_eq!(d[0], None);
        assert_eq!(d[1], None);
        assert!((d[2].unwrap() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn unwrap_examples() {
        assert_eq!(unwrap_phase(&[0.0, 0.1, 0.2]), vec![0.0, 0.1, 0.2]);
        let u = unwrap_phase(&[3.0, -3.0]);
        assert_eq!(u[0], 3.0);
        assert!((u[1] - 3.2832).abs() < 1e-4);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_phase(PI), -PI);
        assert!((wrap_phase(7.0) - (7.0 - TAU)).abs() < 1e-12);
        assert!(wrap_phase(-1e-18) < PI);
    }

    proptest! {
        #[test]
        fn unwrap_inverts_wrapping(omega in -3.0f64..3.0, phi in -3.0f64..3.0, len in 2usize..400) {
            let ramp: Vec<f64> = (0..len).map(|t| omega * t as f64 + phi).collect();
            let wrapped: Vec<f64> = ramp.iter().map(|&v| wrap_phase(v)).collect();
            let un = unwrap_phase(&wrapped);
            let shift = un[0] - ramp[0];
            for (a, b) in un.iter().zip(&ramp) {
                prop_assert!((a - b - shift).abs() < 1e-9);
            }
        }
    }
}
