use crate::error::{Error, Result};
use crate::iq::IqBuffer;

/// Length of the centered moving average applied to `|x|`.
pub const SMOOTHING_WINDOW: usize = 32;

/// Half-open sample ranges whose smoothed magnitude exceeds `threshold`.
/// Active runs closer than `min_gap_samples` are merged.
pub fn segment_transmissions(
    stream: &IqBuffer,
    threshold: f64,
    min_gap_samples: usize,
) -> Result<Vec<(usize, usize)>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument("threshold must be > 0".into()));
    }
    if min_gap_samples == 0 {
        return Err(Error::InvalidArgument("min_gap_samples must be > 0".into()));
    }
    let s = stream.samples();
    if s.is_empty() {
        return Ok(Vec::new());
    }

    let half = SMOOTHING_WINDOW / 2;
    let mags: Vec<f64> = s.iter().map(|x| x.norm()).collect();
    let mut prefix = Vec::with_capacity(mags.len() + 1);
    prefix.push(0.0);
    for m in &mags {
        prefix.push(prefix.last().unwrap() + m);
    }
    let active = |t: usize| {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(mags.len());
        (prefix[hi] - prefix[lo]) / (hi - lo) as f64 > threshold
    };

    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut run_start: Option<usize> = None;
    for t in 0..=mags.len() {
        let on = t < mags.len() && active(t);
        match (on, run_start) {
            (true, None) => run_start = Some(t),
            (false, Some(start)) => {
                match ranges.last_mut() {
                    Some(last) if start - last.1 < min_gap_samples => last.1 = t,
                    _ => ranges.push((start, t)),
                }
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{build_transmission, oqpsk_baseband, DeviceProfile};
    use num_complex::Complex64;

    fn embed(parts: &[(usize, Option<&IqBuffer>)]) -> (IqBuffer, Vec<(usize, usize)>) {
        let mut v = Vec::new();
        let mut truth = Vec::new();
        for (gap, sig) in parts {
            v.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(*gap));
            if let Some(sig) = sig {
                truth.push((v.len(), v.len() + sig.len()));
                v.extend_from_slice(sig.samples());
            }
        }
        (IqBuffer::from_vec(v), truth)
    }

    fn frame() -> IqBuffer {
        let tx = build_transmission(&[0x5Au8; 32], &DeviceProfile::ideal(0), 4).unwrap();
        oqpsk_baseband(&tx)
    }

    #[test]
    fn silence_has_no_segments() {
        let ranges = segment_transmissions(&IqBuffer::zeros(10_000), 0.2, 2000).unwrap();
        assert!(ranges.is_empty());
        assert!(segment_transmissions(&IqBuffer::zeros(0), 0.2, 2000).unwrap().is_empty());
    }

    #[test]
    fn single_transmission_is_covered() {
        let f = frame();
        let (stream, truth) = embed(&[(3000, Some(&f)), (3000, None)]);
        let ranges = segment_transmissions(&stream, 0.2, 2000).unwrap();
        assert_eq!(ranges.len(), 1);
        let (ts, te) = truth[0];
        let (rs, re) = ranges[0];
        let overlap = re.min(te).saturating_sub(rs.max(ts));
        assert!(overlap as f64 >= 0.99 * (te - ts) as f64);
    }

    #[test]
    fn two_transmissions_split_by_gap() {
        let f = frame();
        let (stream, _) = embed(&[(100, Some(&f)), (5000, Some(&f)), (100, None)]);
        let ranges = segment_transmissions(&stream, 0.2, 2000).unwrap();
        assert_eq!(ranges.len(), 2);
        assert!(ranges[0].1 <= ranges[1].0);
    }

    #[test]
    fn short_dropouts_merge() {
        let f = frame();
        let (stream, _) = embed(&[(100, Some(&f)), (500, Some(&f)), (100, None)]);
        assert_eq!(segment_transmissions(&stream, 0.2, 2000).unwrap().len(), 1);
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = IqBuffer::zeros(4);
        assert!(segment_transmissions(&s, 0.0, 10).is_err());
        assert!(segment_transmissions(&s, 0.1, 0).is_err());
    }
}
