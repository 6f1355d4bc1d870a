use num_complex::Complex64;
use rfprint::residual::{
    self, extract_residuals, iterative_correct_decode, residual_signal, DecodeConfig,
    PreprocessParams, RESIDUAL_SAMPLES,
};
use rfprint::waveform::synth::{synth_device, synth_transmission};
use rfprint::waveform::{
    apply_impairments, awgn, build_transmission, oqpsk_baseband, DeviceProfile, GenConfig,
    ImpairmentScale,
};
use rfprint::IqBuffer;

fn population() -> Vec<DeviceProfile> {
    DeviceProfile::default_population(30, ImpairmentScale::default())
}

fn rms_diff(a: &IqBuffer, b: &IqBuffer) -> f64 {
    let s: f64 = a
        .samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum();
    (s / a.len() as f64).sqrt()
}

#[test]
fn zero_offset_ideal_converges_in_one_pass() {
    let tx = build_transmission(&[0xC3; 32], &DeviceProfile::ideal(0), 1).unwrap();
    let sig = oqpsk_baseband(&tx);
    let dec = iterative_correct_decode(&sig, &DecodeConfig::default()).unwrap();
    assert_eq!(dec.iterations, 1);
    assert_eq!(dec.payload(), tx.payload);
    let r = residual_signal(&dec).unwrap();
    assert_eq!(r.len(), RESIDUAL_SAMPLES);
    assert!(r.rms() < 1e-6);
}

#[test]
fn frequency_offset_converges_quickly() {
    let tx = build_transmission(&[0x81; 32], &DeviceProfile::ideal(0), 1).unwrap();
    let sig = apply_impairments(&oqpsk_baseband(&tx), &DeviceProfile::ideal(0), 1e-3, 0.3, 1.0);
    let dec = iterative_correct_decode(&sig, &DecodeConfig::default()).unwrap();
    assert!(dec.iterations <= 4, "iterations {}", dec.iterations);
    assert_eq!(dec.payload(), tx.payload);
    assert!((dec.estimate.omega - 1e-3).abs() < 1e-9);
}

#[test]
fn very_low_snr_is_unrecoverable() {
    let cfg = GenConfig::default();
    let p = &population()[4];
    let st = synth_transmission(&cfg, p, 0);
    let noisy = awgn(&st.signal, -30.0, 9);
    let err = iterative_correct_decode(&noisy, &DecodeConfig::default()).unwrap_err();
    assert!(matches!(err, rfprint::Error::Unrecoverable { .. }));
}

#[test]
fn dc_offset_shows_up_as_constant_residual() {
    let profile = DeviceProfile {
        dc_offset: Complex64::new(0.01, 0.0),
        ..DeviceProfile::ideal(0)
    };
    let tx = build_transmission(&[0x42; 32], &profile, 3).unwrap();
    let sig = apply_impairments(&oqpsk_baseband(&tx), &profile, 4e-4, -1.0, 1.0);
    let dec = iterative_correct_decode(&sig, &DecodeConfig::default()).unwrap();
    let r = residual_signal(&dec).unwrap();
    let mean = r.samples().iter().sum::<Complex64>() / r.len() as f64;
    assert!((mean.norm() - 0.01).abs() < 0.001, "mean residual {mean}");
    let spread = r.samples().iter().map(|s| (s - mean).norm()).fold(0.0, f64::max);
    assert!(spread < 0.005, "residual is not constant: {spread}");
}

#[test]
fn default_profiles_decode_at_20_db() {
    let cfg = GenConfig::default();
    let mut iterations = Vec::new();
    for p in population() {
        for i in 0..4 {
            let st = synth_transmission(&cfg, &p, i);
            let noisy = awgn(&st.signal, 20.0, 1000 + i as u64);
            let dec = iterative_correct_decode(&noisy, &DecodeConfig::default())
                .unwrap_or_else(|e| panic!("device {} tx {i}: {e}", p.device_id));
            assert_eq!(dec.payload(), st.tx.payload);
            iterations.push(dec.iterations);
        }
    }
    let max = *iterations.iter().max().unwrap();
    assert!(max <= 4, "max iterations {max}");
}

#[test]
fn offsets_recovered_noise_free() {
    let cfg = GenConfig::default();
    let (mut worst_w, mut worst_p) = (0.0f64, 0.0f64);
    for p in population() {
        for i in 0..3 {
            let st = synth_transmission(&cfg, &p, i);
            let dec = iterative_correct_decode(&st.signal, &DecodeConfig::default()).unwrap();
            worst_w = worst_w.max((dec.estimate.omega - st.tx.truth.omega_o).abs());
            worst_p = worst_p.max(residual::wrap_phase(dec.estimate.phi - st.tx.truth.phi_o).abs());
        }
    }
    eprintln!("worst omega error {worst_w:e}, worst phi error {worst_p:e}");
    assert!(worst_w <= 1e-7);
    assert!(worst_p <= 1e-3);
}

#[test]
fn residual_is_invariant_to_injected_offsets() {
    let p = &population()[11];
    let tx = build_transmission(&[0x17; 32], p, 5).unwrap();
    let ideal = oqpsk_baseband(&tx);
    let a = apply_impairments(&ideal, p, 2.5e-3, 1.1, 1.0).to_f32_precision();
    let b = apply_impairments(&ideal, p, -1.7e-3, -2.9, 1.0).to_f32_precision();
    let ra = residual_signal(&iterative_correct_decode(&a, &DecodeConfig::default()).unwrap()).unwrap();
    let rb = residual_signal(&iterative_correct_decode(&b, &DecodeConfig::default()).unwrap()).unwrap();
    let rel = rms_diff(&ra, &rb) / ra.rms();
    eprintln!("residual rms {:e}, normalized difference {rel:e}", ra.rms());
    assert!(rel < 1e-3);
}

#[test]
fn profiles_have_distinct_residuals() {
    let pop = population();
    let tx = build_transmission(&[0x99; 32], &pop[0], 5).unwrap();
    let ideal = oqpsk_baseband(&tx);
    let residual_of = |p: &DeviceProfile| {
        let s = apply_impairments(&ideal, p, 1e-3, 0.5, 1.0);
        residual_signal(&iterative_correct_decode(&s, &DecodeConfig::default()).unwrap()).unwrap()
    };
    let floor = residual_of(&DeviceProfile::ideal(0)).rms().max(1e-12);
    for (a, b) in [(0, 1), (3, 17), (28, 29)] {
        let d = rms_diff(&residual_of(&pop[a]), &residual_of(&pop[b]));
        assert!(d >= 10.0 * floor, "devices {a},{b}: {d:e} vs floor {floor:e}");
    }
}

#[test]
fn capture_stream_round_trip() {
    let cfg = GenConfig {
        devices: 3,
        transmissions_per_device: 4,
        ..GenConfig::default()
    };
    for p in cfg.profiles() {
        let cap = synth_device(&cfg, &p);
        let stream = cap.stream.to_f32_precision();
        let results = extract_residuals(&stream, &PreprocessParams::default()).unwrap();
        assert_eq!(results.len(), 4);
        for (r, rec) in results.iter().zip(&cap.records) {
            let r = r.as_ref().expect("segment decodes");
            assert_eq!(r.start, rec.start_sample);
            assert_eq!(hex::encode(r.decoded.payload()), rec.payload_hex);
            assert_eq!(r.residual.len(), RESIDUAL_SAMPLES);
        }
    }
}

#[test]
fn identical_input_identical_residual() {
    let cfg = GenConfig::default();
    let st = synth_transmission(&cfg, &population()[7], 2);
    let a = residual_signal(&iterative_correct_decode(&st.signal, &DecodeConfig::default()).unwrap()).unwrap();
    let b = residual_signal(&iterative_correct_decode(&st.signal, &DecodeConfig::default()).unwrap()).unwrap();
    assert_eq!(a.to_le_bytes(), b.to_le_bytes());
}
