//! Per-device transmitter impairments.
//!
//! The distortion chain applied to an ideal baseband signal is, in order:
//! IQ gain/phase imbalance, DC offset, a short linear-phase FIR ripple, and a
//! memoryless cubic power-amplifier compression term. Carrier offsets and the
//! channel attenuation are applied afterwards by [`apply_impairments`].

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::iq::IqBuffer;
use crate::seed;

/// Seed behind the shipped default device population.
pub const DEFAULT_PROFILE_SEED: u64 = 0x5A16_BEE0_0215_0004;

pub const MAX_DEVICES: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: u32,
    pub iq_gain_imbalance_db: f64,
    pub iq_phase_skew_rad: f64,
    pub dc_offset: Complex64,
    pub pa_nonlinearity_gain3: f64,
    /// Symmetric taps `h_1..h_K`; the filter is `x[n] + sum h_k (x[n-k] + x[n+k])`.
    pub filter_ripple: Vec<f64>,
    /// Per-transmission frequency offset is drawn from
    /// `Normal(freq_offset_mean, freq_offset_std)` in rad/sample.
    pub freq_offset_mean: f64,
    pub freq_offset_std: f64,
}

/// Multipliers on each impairment family of the default population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpairmentScale {
    pub iq: f64,
    pub dc: f64,
    pub ripple: f64,
    pub pa: f64,
    pub freq: f64,
}

impl Default for ImpairmentScale {
    fn default() -> Self {
        Self {
            iq: 1.0,
            dc: 1.0,
            ripple: 1.0,
            pa: 1.0,
            freq: 1.0,
        }
    }
}

impl DeviceProfile {
    /// A transmitter with no impairments and no frequency offset.
    pub fn ideal(device_id: u32) -> Self {
        Self {
            device_id,
            iq_gain_imbalance_db: 0.0,
            iq_phase_skew_rad: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            pa_nonlinearity_gain3: 0.0,
            filter_ripple: Vec::new(),
            freq_offset_mean: 0.0,
            freq_offset_std: 0.0,
        }
    }

    /// The shipped population of `count` devices (at most 30).
    ///
    /// Each impairment parameter is Latin-hypercube sampled: its range is cut
    /// into `count` strata and every device gets a different stratum, so no two
    /// devices share a parameter value.
    pub fn default_population(count: u32, scale: ImpairmentScale) -> Vec<DeviceProfile> {
        assert!(
            (1..=MAX_DEVICES).contains(&count),
            "device count must be in 1..=30"
        );
        let n = count as usize;
        let mut rng = seed::rng(DEFAULT_PROFILE_SEED, &[seed::stream::PROFILE]);
        let strata = |lo: f64, hi: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.into_iter()
                .map(|i| {
                    let u: f64 = rng.random();
                    lo + (hi - lo) * (i as f64 + u) / n as f64
                })
                .collect()
        };
        let gain_db = strata(-0.15, 0.15, &mut rng);
        let skew = strata(-0.012, 0.012, &mut rng);
        let dc_mag = strata(0.005, 0.04, &mut rng);
        let dc_arg = strata(-PI, PI, &mut rng);
        let pa = strata(0.0, 0.08, &mut rng);
        let tap1 = strata(-0.04, 0.04, &mut rng);
        let tap2 = strata(-0.02, 0.02, &mut rng);
        let freq = strata(-3e-3, 3e-3, &mut rng);

        (0..n)
            .map(|d| DeviceProfile {
                device_id: d as u32,
                iq_gain_imbalance_db: scale.iq * gain_db[d],
                iq_phase_skew_rad: scale.iq * skew[d],
                dc_offset: Complex64::from_polar(scale.dc * dc_mag[d], dc_arg[d]),
                pa_nonlinearity_gain3: scale.pa * pa[d],
                filter_ripple: vec![scale.ripple * tap1[d], scale.ripple * tap2[d]],
                freq_offset_mean: scale.freq * freq[d],
                freq_offset_std: scale.freq * 5e-5,
            })
            .collect()
    }

    /// Applies the device distortion chain (no carrier offsets, no
    /// attenuation).
    pub fn distort(&self, ideal: &[Complex64]) -> Vec<Complex64> {
        // IQ imbalance, written as mu*x + nu*conj(x) with the gain split
        // symmetrically between branches and the skew split +-psi/2.
        let g = 10f64.powf(self.iq_gain_imbalance_db / 20.0).sqrt();
        let (sin_h, cos_h) = (self.iq_phase_skew_rad / 2.0).sin_cos();
        let mut out: Vec<Complex64> = ideal
            .iter()
            .map(|x| {
                let i = g * (x.re * cos_h + x.im * sin_h);
                let q = (x.im * cos_h + x.re * sin_h) / g;
                Complex64::new(i, q) + self.dc_offset
            })
            .collect();

        if self.filter_ripple.iter().any(|&h| h != 0.0) {
            let src = out.clone();
            let len = src.len();
            for (n, y) in out.iter_mut().enumerate() {
                for (k, &h) in self.filter_ripple.iter().enumerate() {
                    let lag = k + 1;
                    let before = if n >= lag { src[n - lag] } else { Complex64::new(0.0, 0.0) };
                    let after = if n + lag < len { src[n + lag] } else { Complex64::new(0.0, 0.0) };
                    *y += (before + after) * h;
                }
            }
        }

        if self.pa_nonlinearity_gain3 != 0.0 {
            for y in out.iter_mut() {
                *y *= 1.0 - self.pa_nonlinearity_gain3 * y.norm_sqr();
            }
        }
        out
    }

    pub fn is_ideal(&self) -> bool {
        self.iq_gain_imbalance_db == 0.0
            && self.iq_phase_skew_rad == 0.0
            && self.dc_offset == Complex64::new(0.0, 0.0)
            && self.pa_nonlinearity_gain3 == 0.0
            && self.filter_ripple.iter().all(|&h| h == 0.0)
    }
}

/// `amplitude * distort(ideal)[t] * exp(i (omega_o t + phi_o))`.
pub fn apply_impairments(
    ideal: &IqBuffer,
    profile: &DeviceProfile,
    omega_o: f64,
    phi_o: f64,
    amplitude: f64,
) -> IqBuffer {
    assert!(amplitude > 0.0, "amplitude must be positive");
    let distorted = if profile.is_ideal() {
        ideal.samples().to_vec()
    } else {
        profile.distort(ideal.samples())
    };
    if omega_o == 0.0 && phi_o == 0.0 && amplitude == 1.0 {
        return IqBuffer::from_vec(distorted);
    }
    IqBuffer::from_vec(
        distorted
            .into_iter()
            .enumerate()
            .map(|(t, x)| x * Complex64::from_polar(amplitude, omega_o * t as f64 + phi_o))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize) -> IqBuffer {
        IqBuffer::from_vec(vec![Complex64::new(1.0, 0.0); len])
    }

    #[test]
    fn identity_for_ideal_profile() {
        let x = IqBuffer::from_vec(
            (0..64)
                .map(|t| Complex64::from_polar(1.0, 0.3 * t as f64))
                .collect(),
        );
        let y = apply_impairments(&x, &DeviceProfile::ideal(0), 0.0, 0.0, 1.0);
        assert_eq!(x, y);
    }

    #[test]
    fn pure_rotation() {
        let y = apply_impairments(&tone(5000), &DeviceProfile::ideal(0), 1e-3, 0.0, 1.0);
        for (t, s) in y.samples().iter().enumerate() {
            let expected = Complex64::from_polar(1.0, 1e-3 * t as f64);
            assert!((s - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn amplitude_halves() {
        let x = IqBuffer::from_vec(vec![Complex64::new(0.6, -0.8); 32]);
        let y = apply_impairments(&x, &DeviceProfile::ideal(0), 0.0, 0.0, 0.5);
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert_eq!(*b, *a * 0.5);
        }
    }

    #[test]
    fn population_is_distinct() {
        let pop = DeviceProfile::default_population(30, ImpairmentScale::default());
        for a in 0..pop.len() {
            for b in a + 1..pop.len() {
                assert_ne!(pop[a].iq_gain_imbalance_db, pop[b].iq_gain_imbalance_db);
                assert_ne!(pop[a].dc_offset, pop[b].dc_offset);
            }
        }
    }

    #[test]
    fn population_is_deterministic() {
        let a = DeviceProfile::default_population(4, ImpairmentScale::default());
        let b = DeviceProfile::default_population(4, ImpairmentScale::default());
        assert_eq!(a, b);
    }
}
