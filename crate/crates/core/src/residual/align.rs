use std::f64::consts::PI;

use super::phase::phase_derivative;
use crate::error::{Error, Result};
use crate::iq::IqBuffer;

/// Start offset `t0` in `[0, search_window)` minimising the root-sum-square
/// distance between the phase derivative of `tx[t0..]` and that of
/// `reference`.
///
/// Reference elements that are undefined are skipped. A defined reference
/// element facing an undefined `tx` element costs `pi^2`, the largest possible
/// squared mismatch, so silent stretches never look like a match. Ties go to
/// the earliest offset.
pub fn align_preamble(tx: &IqBuffer, reference: &IqBuffer, search_window: usize) -> Result<usize> {
    if search_window == 0 {
        return Err(Error::InvalidArgument("search_window must be >= 1".into()));
    }
    if tx.len() < reference.len() {
        return Err(Error::Length {
            context: "alignment input shorter than reference",
            expected: reference.len(),
            actual: tx.len(),
        });
    }
    let d_ref = phase_derivative(reference)?;
    let d_tx = phase_derivative(tx)?;
    let last = (tx.len() - reference.len()).min(search_window - 1);

    let mut best = (f64::INFINITY, 0usize);
    for t0 in 0..=last {
        let mut cost = 0.0;
        for (r, x) in d_ref.iter().zip(&d_tx[t0..]) {
            match (r, x) {
                (Some(r), Some(x)) => cost += (x - r) * (x - r),
                (Some(_), None) => cost += PI * PI,
                (None, _) => {}
            }
            if cost >= best.0 {
                break;
            }
        }
        if cost < best.0 {
            best = (cost, t0);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{apply_impairments, preamble_reference, DeviceProfile};
    use num_complex::Complex64;

    fn prefixed(n: usize, sig: &IqBuffer) -> IqBuffer {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        v.extend_from_slice(sig.samples());
        v.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(300));
        IqBuffer::from_vec(v)
    }

    #[test]
    fn exact_reference() {
        let r = preamble_reference();
        assert_eq!(align_preamble(&r, &r, 1).unwrap(), 0);
        assert_eq!(align_preamble(&prefixed(0, &r), &r, 200).unwrap(), 0);
    }

    #[test]
    fn silence_prefix() {
        let r = preamble_reference();
        assert_eq!(align_preamble(&prefixed(100, &r), &r, 256).unwrap(), 100);
    }

    #[test]
    fn frequency_offset_does_not_move_alignment() {
        let r = preamble_reference();
        let rotated = apply_impairments(&r, &DeviceProfile::ideal(0), 1e-3, 0.4, 1.0);
        let a = align_preamble(&prefixed(37, &r), &r, 256).unwrap();
        let b = align_preamble(&prefixed(37, &rotated), &r, 256).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_input_is_error() {
        let r = preamble_reference();
        let short = r.slice(0, 100);
        assert!(matches!(
            align_preamble(&short, &r, 4),
            Err(Error::Length { .. })
        ));
    }
}
