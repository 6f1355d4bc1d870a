//! Capture synthesis: one raw IQ stream per device holding that device's
//! transmissions separated by silence, plus a JSON-lines manifest of ground
//! truth.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    add_noise, apply_impairments, build_transmission, oqpsk_baseband, DeviceProfile,
    ImpairmentScale, Transmission, PAYLOAD_LEN,
};
use crate::error::{Error, Result};
use crate::iq::IqBuffer;
use crate::{residual, seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub devices: u32,
    pub transmissions_per_device: u32,
    pub seed: u64,
    pub output: PathBuf,
    /// Receiver noise relative to a unit-power transmitter; `None` is noise-free.
    pub snr_db: Option<f64>,
    /// Per-transmission attenuation is uniform on this range.
    pub amplitude_range: (f64, f64),
    /// Silence before, between and after transmissions.
    pub gap_samples: usize,
    pub impairment_scale: ImpairmentScale,
    /// Decode one 20 dB transmission per device before writing anything.
    pub self_test: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            devices: 30,
            transmissions_per_device: 200,
            seed: 1,
            output: PathBuf::from("data/raw"),
            snr_db: None,
            amplitude_range: (0.9, 1.1),
            gap_samples: 2048,
            impairment_scale: ImpairmentScale::default(),
            self_test: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=super::profile::MAX_DEVICES).contains(&self.devices) {
            return Err(Error::Config(format!(
                "devices must be in 1..=30, got {}",
                self.devices
            )));
        }
        if self.transmissions_per_device == 0 {
            return Err(Error::Config("transmissions_per_device must be > 0".into()));
        }
        let (lo, hi) = self.amplitude_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad amplitude_range ({lo}, {hi})")));
        }
        if self.gap_samples < 2000 {
            return Err(Error::Config("gap_samples must be at least 2000".into()));
        }
        Ok(())
    }

    pub fn profiles(&self) -> Vec<DeviceProfile> {
        DeviceProfile::default_population(self.devices, self.impairment_scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub device_id: u32,
    pub tx_index: u32,
    pub file: String,
    pub start_sample: usize,
    pub omega_o: f64,
    pub phi_o: f64,
    pub amplitude: f64,
    pub payload_hex: String,
}

#[derive(Debug, Clone)]
pub struct SynthTransmission {
    pub tx: Transmission,
    pub amplitude: f64,
    /// Impaired, attenuated and rotated; no receiver noise.
    pub signal: IqBuffer,
}

pub fn synth_transmission(config: &GenConfig, profile: &DeviceProfile, tx_index: u32) -> SynthTransmission {
    let path = [
        seed::stream::TRANSMISSION,
        profile.device_id as u64,
        tx_index as u64,
    ];
    let mut rng = seed::rng(config.seed, &path);
    let mut payload = [0u8; PAYLOAD_LEN];
    rng.fill_bytes(&mut payload);
    let (lo, hi) = config.amplitude_range;
    let amplitude = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let tx = build_transmission(&payload, profile, seed::derive(config.seed, &path))
        .expect("payload has the right length");
    let ideal = oqpsk_baseband(&tx);
    let signal = apply_impairments(&ideal, profile, tx.truth.omega_o, tx.truth.phi_o, amplitude);
    SynthTransmission {
        tx,
        amplitude,
        signal,
    }
}

#[derive(Debug, Clone)]
pub struct DeviceCapture {
    pub device_id: u32,
    pub stream: IqBuffer,
    pub records: Vec<ManifestRecord>,
}

pub fn device_file_name(device_id: u32) -> String {
    format!("device_{device_id:02}.iq")
}

/// Builds one device's capture stream in memory.
pub fn synth_device(config: &GenConfig, profile: &DeviceProfile) -> DeviceCapture {
    let gap = config.gap_samples;
    let n_tx = config.transmissions_per_device as usize;
    let frame = super::FRAME_SAMPLES;
    let mut samples = vec![Complex64::new(0.0, 0.0); gap + n_tx * (frame + gap)];
    let file = device_file_name(profile.device_id);
    let mut records = Vec::with_capacity(n_tx);
    for i in 0..n_tx {
        let st = synth_transmission(config, profile, i as u32);
        let start = gap + i * (frame + gap);
        samples[start..start + frame].copy_from_slice(st.signal.samples());
        records.push(ManifestRecord {
            device_id: profile.device_id,
            tx_index: i as u32,
            file: file.clone(),
            start_sample: start,
            omega_o: st.tx.truth.omega_o,
            phi_o: st.tx.truth.phi_o,
            amplitude: st.amplitude,
            payload_hex: hex::encode(st.tx.payload),
        });
    }
    if let Some(snr) = config.snr_db {
        let mut rng = seed::rng(
            config.seed,
            &[seed::stream::TRANSMISSION, profile.device_id as u64, u64::MAX],
        );
        add_noise(&mut samples, 10f64.powf(-snr / 10.0), &mut rng);
    }
    DeviceCapture {
        device_id: profile.device_id,
        stream: IqBuffer::from_vec(samples),
        records,
    }
}

/// Checks that every profile decodes bit-exactly at 20 dB SNR.
pub fn self_test(config: &GenConfig, profiles: &[DeviceProfile]) -> Result<()> {
    for p in profiles {
        let st = synth_transmission(config, p, u32::MAX);
        let noisy = super::awgn(&st.signal, 20.0, seed::derive(config.seed, &[p.device_id as u64]));
        let decoded = residual::iterative_correct_decode(&noisy, &residual::DecodeConfig::default())
            .map_err(|e| {
                Error::Config(format!(
                    "device {} fails the 20 dB self-test: {e}",
                    p.device_id
                ))
            })?;
        if decoded.payload() != st.tx.payload {
            return Err(Error::Config(format!(
                "device {} decodes with bit errors at 20 dB",
                p.device_id
            )));
        }
    }
    Ok(())
}

/// Writes `device_XX.iq` per device, `manifest.jsonl` and `profiles.json`
/// under `config.output`. Returns the manifest.
pub fn synth_dataset(config: &GenConfig) -> Result<Vec<ManifestRecord>> {
    config.validate()?;
    let profiles = config.profiles();
    if config.self_test {
        self_test(config, &profiles)?;
    }
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let captures: Vec<Result<Vec<ManifestRecord>>> = profiles
        .par_iter()
        .map(|p| {
            let cap = synth_device(config, p);
            cap.stream.write_file(&out.join(device_file_name(p.device_id)))?;
            Ok(cap.records)
        })
        .collect();
    let mut manifest = Vec::new();
    for c in captures {
        manifest.extend(c?);
    }

    write_manifest(&out.join("manifest.jsonl"), &manifest)?;
    let profiles_path = out.join("profiles.json");
    fs::write(&profiles_path, serde_json::to_vec_pretty(&profiles)?)
        .map_err(|e| Error::io(&profiles_path, e))?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
