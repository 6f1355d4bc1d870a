use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::iq::IqBuffer;
use crate::seed;

/// Adds complex white Gaussian noise of total power `noise_power` (split
/// evenly between I and Q) drawn from `rng`.
pub fn add_noise<R: Rng>(samples: &mut [Complex64], noise_power: f64, rng: &mut R) {
    if noise_power <= 0.0 {
        return;
    }
    let sigma = (noise_power / 2.0).sqrt();
    for s in samples {
        let ni: f64 = rng.sample(StandardNormal);
        let nq: f64 = rng.sample(StandardNormal);
        *s += Complex64::new(sigma * ni, sigma * nq);
    }
}

/// AWGN at `snr_db` relative to the buffer's own mean power. An infinite SNR
/// returns the input unchanged.
pub fn awgn(signal: &IqBuffer, snr_db: f64, rng_seed: u64) -> IqBuffer {
    assert!(!signal.is_empty(), "awgn needs a nonempty signal");
    if snr_db == f64::INFINITY {
        return signal.clone();
    }
    let noise_power = signal.power() / 10f64.powf(snr_db / 10.0);
    let mut samples = signal.samples().to_vec();
    let mut rng = seed::rng(rng_seed, &[seed::stream::SWEEP]);
    add_noise(&mut samples, noise_power, &mut rng);
    IqBuffer::from_vec(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_power(len: usize) -> IqBuffer {
        IqBuffer::from_vec(
            (0..len)
                .map(|t| Complex64::from_polar(1.0, 0.01 * t as f64))
                .collect(),
        )
    }

    #[test]
    fn infinite_snr_is_identity() {
        let x = unit_power(100);
        assert_eq!(awgn(&x, f64::INFINITY, 3), x);
    }

    #[test]
    fn zero_db_noise_power() {
        let x = unit_power(200_000);
        let y = awgn(&x, 0.0, 11);
        let noise: f64 = x
            .samples()
            .iter()
            .zip(y.samples())
            .map(|(a, b)| (b - a).norm_sqr())
            .sum::<f64>()
            / x.len() as f64;
        assert!((noise - 1.0).abs() < 0.05, "noise power {noise}");
    }

    #[test]
    fn output_power_scales_with_snr() {
        let x = unit_power(200_000);
        for snr in [-10.0, 0.0, 10.0] {
            let y = awgn(&x, snr, 5);
            let expected = x.power() * (1.0 + 10f64.powf(-snr / 10.0));
            assert!((y.power() / expected - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn reproducible() {
        let x = unit_power(64);
        assert_eq!(awgn(&x, 3.0, 42), awgn(&x, 3.0, 42));
        assert_ne!(awgn(&x, 3.0, 42), awgn(&x, 3.0, 43));
    }
}
