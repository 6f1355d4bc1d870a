//! Data units, splits, normalisation and the on-disk unit file.
//!
//! A residual transmission of 17,408 samples is cut into 17 two-byte units of
//! 1,024 complex samples. Each unit is reshaped to 64 channels by 32 steps:
//! column `i` stacks `I[32i..32i+32]` over `Q[32i..32i+32]`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::iq::IqBuffer;
use crate::residual::{self, PreprocessParams, RESIDUAL_SAMPLES};
use crate::seed;
use crate::waveform::synth::{device_file_name, read_manifest, synth_device, GenConfig, ManifestRecord};

pub const UNITS_PER_TX: usize = 17;
pub const UNIT_SAMPLES: usize = 1024;
pub const CHANNELS: usize = 64;
pub const STEPS: usize = 32;
/// Values per reshaped unit.
pub const UNIT_LEN: usize = CHANNELS * STEPS;

const MAGIC: &[u8; 8] = b"RFPUNITS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 6 * 4;

/// Cuts a residual into 17 consecutive 1,024-sample units.
pub fn slice_units(residual: &IqBuffer) -> Result<Vec<IqBuffer>> {
    if residual.len() != RESIDUAL_SAMPLES {
        return Err(Error::Length {
            context: "residual transmission",
            expected: RESIDUAL_SAMPLES,
            actual: residual.len(),
        });
    }
    Ok((0..UNITS_PER_TX)
        .map(|n| residual.slice(n * UNIT_SAMPLES, (n + 1) * UNIT_SAMPLES))
        .collect())
}

/// `2 x 1024` complex unit to a row-major `64 x 32` matrix.
pub fn reshape_unit(z: &[Complex64]) -> Result<Vec<f64>> {
    if z.len() != UNIT_SAMPLES {
        return Err(Error::Shape {
            stage: "reshape_unit",
            detail: format!("expected 2x{UNIT_SAMPLES}, got 2x{}", z.len()),
        });
    }
    let mut x = vec![0.0; UNIT_LEN];
    for col in 0..STEPS {
        for r in 0..32 {
            let s = z[32 * col + r];
            x[r * STEPS + col] = s.re;
            x[(r + 32) * STEPS + col] = s.im;
        }
    }
    Ok(x)
}

/// Inverse of [`reshape_unit`].
pub fn unreshape_unit(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.len() != UNIT_LEN {
        return Err(Error::Shape {
            stage: "unreshape_unit",
            detail: format!("expected {CHANNELS}x{STEPS}, got {} values", x.len()),
        });
    }
    let mut z = vec![Complex64::new(0.0, 0.0); UNIT_SAMPLES];
    for col in 0..STEPS {
        for r in 0..32 {
            z[32 * col + r] = Complex64::new(x[r * STEPS + col], x[(r + 32) * STEPS + col]);
        }
    }
    Ok(z)
}

/// Rearranges a `64 x 32` unit into the `2 x 1024` plane layout
/// (`I` samples, then `Q` samples).
pub fn unit_to_planes(x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), UNIT_LEN);
    debug_assert_eq!(out.len(), 2 * UNIT_SAMPLES);
    for col in 0..STEPS {
        for r in 0..32 {
            out[32 * col + r] = x[r * STEPS + col];
            out[UNIT_SAMPLES + 32 * col + r] = x[(r + 32) * STEPS + col];
        }
    }
}

/// One classifier input, copied out of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DataUnit {
    /// Row-major `64 x 32`.
    pub x: Vec<f32>,
    pub label: u8,
    pub tx_id: u32,
    pub unit_index: u8,
}

/// Raw (unnormalised) data units, grouped by transmission: the 17 units of a
/// transmission are stored consecutively.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub num_classes: usize,
    tx_ids: Vec<u32>,
    labels: Vec<u8>,
    data: Vec<f32>,
}

impl Dataset {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn push_residual(&mut self, tx_id: u32, label: u8, residual: &IqBuffer) -> Result<()> {
        if label as usize >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside {} classes",
                self.num_classes
            )));
        }
        let units = slice_units(residual)?;
        self.data.reserve(UNITS_PER_TX * UNIT_LEN);
        for u in &units {
            self.data
                .extend(reshape_unit(u.samples())?.into_iter().map(|v| v as f32));
        }
        self.tx_ids.push(tx_id);
        self.labels.push(label);
        Ok(())
    }

    pub fn num_transmissions(&self) -> usize {
        self.tx_ids.len()
    }

    pub fn num_units(&self) -> usize {
        self.tx_ids.len() * UNITS_PER_TX
    }

    pub fn tx_ids(&self) -> &[u32] {
        &self.tx_ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Unit `n` of the transmission at position `pos`.
    pub fn unit(&self, pos: usize, n: usize) -> &[f32] {
        let start = (pos * UNITS_PER_TX + n) * UNIT_LEN;
        &self.data[start..start + UNIT_LEN]
    }

    pub fn data_unit(&self, pos: usize, n: usize) -> DataUnit {
        DataUnit {
            x: self.unit(pos, n).to_vec(),
            label: self.labels[pos],
            tx_id: self.tx_ids[pos],
            unit_index: n as u8,
        }
    }

    /// Positions of the given transmission ids.
    pub fn positions(&self, tx_ids: &[u32]) -> Result<Vec<usize>> {
        let index: HashMap<u32, usize> = self
            .tx_ids
            .iter()
            .enumerate()
            .map(|(p, &id)| (id, p))
            .collect();
        tx_ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown transmission {id}")))
            })
            .collect()
    }

    /// `(tx_id, label)` for every transmission.
    pub fn records(&self) -> Vec<(u32, u8)> {
        self.tx_ids.iter().copied().zip(self.labels.iter().copied()).collect()
    }

    /// Digest of the content, used to tie reports to a test set.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes_body()))
    }

    fn to_bytes_body(&self) -> Vec<u8> {
        let n = self.num_transmissions();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n + self.num_units() * (4 * UNIT_LEN + 1));
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            n as u32,
            UNITS_PER_TX as u32,
            CHANNELS as u32,
            STEPS as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.tx_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for (pos, &label) in self.labels.iter().enumerate() {
            for n in 0..UNITS_PER_TX {
                for v in self.unit(pos, n) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.push(label);
            }
        }
        out
    }

    /// Header, transmission ids, per-unit `64 x 32` binary32 block plus label
    /// byte, and a trailing SHA-256 of everything before it.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let body = self.to_bytes_body();
        let digest = Sha256::digest(&body);
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&body)
            .and_then(|_| w.write_all(&digest))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let format = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < HEADER_LEN + 32 || &bytes[..8] != MAGIC {
            return Err(format("not a unit file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum(format!(
                "{}: content does not match its SHA-256 trailer",
                path.display()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(body[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let (version, n, upt, ch, st, classes) =
            (word(0), word(1) as usize, word(2), word(3), word(4), word(5));
        if version != VERSION
            || upt as usize != UNITS_PER_TX
            || ch as usize != CHANNELS
            || st as usize != STEPS
        {
            return Err(format(format!(
                "unsupported layout v{version} {upt} units of {ch}x{st}"
            )));
        }
        let unit_bytes = 4 * UNIT_LEN + 1;
        let expected = HEADER_LEN + 4 * n + n * UNITS_PER_TX * unit_bytes;
        if body.len() != expected {
            return Err(format(format!("expected {expected} bytes, found {}", body.len())));
        }
        let mut ds = Dataset::new(classes as usize);
        let ids = &body[HEADER_LEN..HEADER_LEN + 4 * n];
        ds.tx_ids = ids
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ds.data.reserve(n * UNITS_PER_TX * UNIT_LEN);
        let units = &body[HEADER_LEN + 4 * n..];
        for (t, tx) in units.chunks_exact(UNITS_PER_TX * unit_bytes).enumerate() {
            let mut label = None;
            for u in tx.chunks_exact(unit_bytes) {
                let l = u[4 * UNIT_LEN];
                if label.is_some_and(|prev| prev != l) {
                    return Err(format(format!("transmission {t} has mixed unit labels")));
                }
                label = Some(l);
                ds.data.extend(
                    u[..4 * UNIT_LEN]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
                );
            }
            let l = label.expect("17 units per transmission");
            if l as usize >= ds.num_classes {
                return Err(format(format!("label {l} outside {} classes", ds.num_classes)));
            }
            ds.labels.push(l);
        }
        Ok(ds)
    }
}

/// Transmission-level train/dev/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: (f64, f64, f64),
    pub train: Vec<u32>,
    pub dev: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitManifest {
    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

pub const MIN_TX_PER_DEVICE: usize = 10;

/// Stratified 80/10/10 split of `(tx_id, device)` records. Each device's
/// transmissions are shuffled; dev and test get `floor(n / 10)` each and the
/// rest go to train.
pub fn split_dataset(records: &[(u32, u8)], seed: u64) -> Result<SplitManifest> {
    let mut by_device: BTreeMap<u8, Vec<u32>> = BTreeMap::new();
    for &(id, dev) in records {
        by_device.entry(dev).or_default().push(id);
    }
    let mut split = SplitManifest {
        seed,
        fractions: (0.8, 0.1, 0.1),
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for (dev, mut ids) in by_device {
        if ids.len() < MIN_TX_PER_DEVICE {
            return Err(Error::InvalidArgument(format!(
                "device {dev} has {} transmissions, at least {MIN_TX_PER_DEVICE} needed",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut seed::rng(seed, &[seed::stream::SPLIT, dev as u64]));
        let k = ids.len() / 10;
        split.dev.extend_from_slice(&ids[..k]);
        split.test.extend_from_slice(&ids[k..2 * k]);
        split.train.extend_from_slice(&ids[2 * k..]);
    }
    split.train.sort_unstable();
    split.dev.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Per-channel standardisation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const VARIANCE_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Mean and floored standard deviation of each of the 64 channels over
    /// every unit of the given transmissions.
    pub fn compute(ds: &Dataset, positions: &[usize]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("normalisation over an empty split".into()));
        }
        let mut sum = vec![0.0f64; CHANNELS];
        let mut sq = vec![0.0f64; CHANNELS];
        for &p in positions {
            for n in 0..UNITS_PER_TX {
                for (c, row) in ds.unit(p, n).chunks_exact(STEPS).enumerate() {
                    for &v in row {
                        sum[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
            }
        }
        let count = (positions.len() * UNITS_PER_TX * STEPS) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(VARIANCE_FLOOR).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; CHANNELS],
            std: vec![1.0; CHANNELS],
        }
    }

    /// Standardises one raw unit into `out`.
    pub fn apply(&self, x: &[f32], out: &mut [f64]) {
        for (c, (row, o)) in x.chunks_exact(STEPS).zip(out.chunks_exact_mut(STEPS)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            for (v, o) in row.iter().zip(o) {
                *o = (*v as f64 - m) / s;
            }
        }
    }
}

/// Standardises each unit with the given (training-split) statistics.
pub fn normalize_units(units: &[DataUnit], stats: &NormStats) -> Vec<Vec<f64>> {
    units
        .iter()
        .map(|u| {
            let mut out = vec![0.0; UNIT_LEN];
            stats.apply(&u.x, &mut out);
            out
        })
        .collect()
}

/// Residual extraction failures, by capture file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub transmissions: usize,
    pub extracted: usize,
    pub failures: Vec<String>,
}

fn device_dataset(
    stream: &IqBuffer,
    records: &[(u32, &ManifestRecord)],
    params: &PreprocessParams,
    num_classes: usize,
) -> Result<(Dataset, Vec<String>)> {
    let results = residual::extract_residuals(stream, params)?;
    let mut ds = Dataset::new(num_classes);
    let mut failures = Vec::new();
    let mut next = 0usize;
    for r in results {
        let (seg_start, seg_end) = match &r {
            Ok(ex) => ex.segment,
            Err((s, e, _)) => (*s, *e),
        };
        // Transmissions starting well before this segment were never detected.
        while next < records.len() && records[next].1.start_sample + 64 < seg_start {
            let rec = records[next].1;
            failures.push(format!("device {} tx {}: no segment detected", rec.device_id, rec.tx_index));
            next += 1;
        }
        let matched = records.get(next).filter(|(_, rec)| rec.start_sample <= seg_end);
        let Some(&(id, rec)) = matched else {
            failures.push(format!("segment {seg_start}..{seg_end} has no manifest entry"));
            continue;
        };
        next += 1;
        match r {
            Ok(ex) => ds.push_residual(id, rec.device_id as u8, &ex.residual)?,
            Err((_, _, err)) => failures.push(format!(
                "device {} tx {}: {err}",
                rec.device_id, rec.tx_index
            )),
        }
    }
    for (_, rec) in &records[next.min(records.len())..] {
        failures.push(format!(
            "device {} tx {}: no segment detected",
            rec.device_id, rec.tx_index
        ));
    }
    Ok((ds, failures))
}

fn concat(parts: Vec<Dataset>, num_classes: usize) -> Dataset {
    let mut ds = Dataset::new(num_classes);
    for p in parts {
        ds.tx_ids.extend(p.tx_ids);
        ds.labels.extend(p.labels);
        ds.data.extend(p.data);
    }
    ds
}

/// Runs residual extraction over every capture listed in a generated
/// manifest. Transmission ids are manifest line numbers; labels are device
/// ids.
pub fn preprocess_dir(raw_dir: &Path, params: &PreprocessParams) -> Result<(Dataset, PreprocessReport)> {
    let manifest = read_manifest(&raw_dir.join("manifest.jsonl"))?;
    let num_classes = manifest.iter().map(|r| r.device_id as usize + 1).max().unwrap_or(0);
    let mut files: BTreeMap<&str, Vec<(u32, &ManifestRecord)>> = BTreeMap::new();
    for (i, r) in manifest.iter().enumerate() {
        files.entry(r.file.as_str()).or_default().push((i as u32, r));
    }
    let parts: Vec<Result<(Dataset, Vec<String>)>> = files
        .par_iter()
        .map(|(file, recs)| {
            let stream = IqBuffer::read_file(&raw_dir.join(file))?;
            device_dataset(&stream, recs, params, num_classes)
        })
        .collect();
    let mut datasets = Vec::new();
    let mut report = PreprocessReport {
        transmissions: manifest.len(),
        ..Default::default()
    };
    for p in parts {
        let (ds, failures) = p?;
        report.extracted += ds.num_transmissions();
        report.failures.extend(failures);
        datasets.push(ds);
    }
    Ok((concat(datasets, num_classes), report))
}

/// Generates captures in memory (binary32 precision, as if written and read
/// back) and extracts the unit dataset, without touching the filesystem.
pub fn generate_in_memory(config: &GenConfig, params: &PreprocessParams) -> Result<(Dataset, PreprocessReport)> {
    config.validate()?;
    let profiles = config.profiles();
    let num_classes = config.devices as usize;
    let tpd = config.transmissions_per_device;
    let parts: Vec<Result<(Dataset, Vec<String>)>> = profiles
        .par_iter()
        .map(|p| {
            let cap = synth_device(config, p);
            let stream = cap.stream.to_f32_precision();
            let recs: Vec<(u32, &ManifestRecord)> = cap
                .records
                .iter()
                .map(|r| (r.device_id * tpd + r.tx_index, r))
                .collect();
            device_dataset(&stream, &recs, params, num_classes)
        })
        .collect();
    let mut datasets = Vec::new();
    let mut report = PreprocessReport {
        transmissions: (config.devices * tpd) as usize,
        ..Default::default()
    };
    for p in parts {
        let (ds, failures) = p?;
        report.extracted += ds.num_transmissions();
        report.failures.extend(failures);
        datasets.push(ds);
    }
    Ok((concat(datasets, num_classes), report))
}

/// Standard file names inside a dataset directory.
pub fn units_path(dir: &Path) -> PathBuf {
    dir.join("units.bin")
}

pub fn split_path(dir: &Path) -> PathBuf {
    dir.join("split.json")
}

/// The raw device file for a manifest record.
pub fn capture_path(raw_dir: &Path, device_id: u32) -> PathBuf {
    raw_dir.join(device_file_name(device_id))
}
