//! Hardware cost model: MAC counts, MAC-linear energy, a dataflow pipeline
//! timing model, and a fixed-point inference emulator.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, UNITS_PER_TX};
use crate::error::{Error, Result};
use crate::eval::{self, TxLogProbs};
use crate::model::ops::{elu, log_softmax, lorentzian};
use crate::model::{argmax, LayerSpec, Model, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMacs {
    pub stage: String,
    pub macs: u64,
}

/// Multiply-accumulates per data unit, by parametric layer. The PRNN does
/// `W_in x + W_rec sigma(s)` per step; convolutions `out_len * c_out * c_in *
/// k`; dense layers `in * out`. Pooling, activations and biases are free.
pub fn count_macs(spec: &ModelSpec) -> Result<Vec<StageMacs>> {
    let shapes = spec.shapes()?;
    Ok(spec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let macs = match *l {
                LayerSpec::Prnn { inputs, neurons, .. } => shapes[i].1 * (neurons * inputs + neurons * neurons),
                LayerSpec::Conv1d { in_ch, out_ch, kernel, .. } => shapes[i + 1].1 * out_ch * in_ch * kernel,
                LayerSpec::Dense { inputs, outputs, .. } => inputs * outputs,
                _ => return None,
            };
            Some(StageMacs {
                stage: l.name().unwrap_or_default().to_string(),
                macs: macs as u64,
            })
        })
        .collect())
}

pub fn total_macs(spec: &ModelSpec) -> Result<u64> {
    Ok(count_macs(spec)?.iter().map(|s| s.macs).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwConfig {
    pub clock_hz: f64,
    /// Parallel multiply-accumulate lanes per pipeline stage, by layer name.
    pub mac_lanes_per_stage: BTreeMap<String, u64>,
    /// Cycles between dependent vector operations in the recurrent stage.
    pub prnn_ii_cycles: u64,
    pub energy_per_mac_j: f64,
}

impl Default for HwConfig {
    fn default() -> Self {
        Self::calibrated()
    }
}

impl HwConfig {
    /// Lane allocation calibrated so that both classifiers land near the
    /// published per-classification timing at 100 MHz. Stage names are shared
    /// between the two networks where they coincide (`conv1`, `conv2`).
    pub fn calibrated() -> Self {
        let lanes = [
            ("prnn", 80),
            ("conv1", 5),
            ("conv2", 15),
            ("conv3", 64),
            ("fc", 1),
            ("fc1", 16),
            ("fc2", 8),
            ("fc3", 1),
        ];
        Self {
            clock_hz: 100e6,
            mac_lanes_per_stage: lanes.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            prnn_ii_cycles: 16,
            energy_per_mac_j: 170e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(Error::Config(format!("clock_hz must be positive, got {}", self.clock_hz)));
        }
        if let Some((k, _)) = self.mac_lanes_per_stage.iter().find(|(_, &v)| v == 0) {
            return Err(Error::Config(format!("stage {k} has zero lanes")));
        }
        if self.prnn_ii_cycles == 0 || !(self.energy_per_mac_j >= 0.0) {
            return Err(Error::Config("prnn_ii_cycles must be >= 1 and energy_per_mac_j >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEstimate {
    pub stage: String,
    pub macs: u64,
    pub lanes: u64,
    pub cycles: u64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwEstimate {
    pub macs_per_unit: u64,
    pub energy_j: f64,
    pub latency_s: f64,
    pub throughput_per_s: f64,
    pub per_stage: Vec<StageEstimate>,
}

pub fn estimate_energy(spec: &ModelSpec, cfg: &HwConfig) -> Result<f64> {
    Ok(total_macs(spec)? as f64 * cfg.energy_per_mac_j)
}

/// Stage cycles are `ceil(MACs / lanes)`, times the initiation interval for
/// the recurrent stage. Latency is the sum over stages; throughput is set by
/// the slowest stage.
pub fn estimate_latency_throughput(spec: &ModelSpec, cfg: &HwConfig) -> Result<(f64, f64, Vec<StageEstimate>)> {
    cfg.validate()?;
    let recurrent: Vec<&str> = spec
        .layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Prnn { .. }))
        .filter_map(|l| l.name())
        .collect();
    let mut stages = Vec::new();
    for s in count_macs(spec)? {
        let lanes = *cfg
            .mac_lanes_per_stage
            .get(&s.stage)
            .ok_or_else(|| Error::Config(format!("no MAC lanes configured for stage {}", s.stage)))?;
        let ii = if recurrent.contains(&s.stage.as_str()) {
            cfg.prnn_ii_cycles
        } else {
            1
        };
        let cycles = s.macs.div_ceil(lanes) * ii;
        stages.push(StageEstimate {
            latency_s: cycles as f64 / cfg.clock_hz,
            stage: s.stage,
            macs: s.macs,
            lanes,
            cycles,
        });
    }
    let total: u64 = stages.iter().map(|s| s.cycles).sum();
    let slowest = stages.iter().map(|s| s.cycles).max().unwrap_or(1).max(1);
    Ok((total as f64 / cfg.clock_hz, cfg.clock_hz / slowest as f64, stages))
}

pub fn estimate(spec: &ModelSpec, cfg: &HwConfig) -> Result<HwEstimate> {
    let (latency_s, throughput_per_s, per_stage) = estimate_latency_throughput(spec, cfg)?;
    let macs_per_unit = per_stage.iter().map(|s| s.macs).sum();
    Ok(HwEstimate {
        macs_per_unit,
        energy_j: macs_per_unit as f64 * cfg.energy_per_mac_j,
        latency_s,
        throughput_per_s,
        per_stage,
    })
}

/// Signed fixed point with `total_bits` bits of which `frac_bits` are
/// fractional; round half to even, saturate on overflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedFormat {
    pub total_bits: u32,
    pub frac_bits: u32,
}

impl Default for FixedFormat {
    fn default() -> Self {
        Self {
            total_bits: 16,
            frac_bits: 10,
        }
    }
}

/// Widest format the emulator's 128-bit accumulators handle safely.
pub const MAX_TOTAL_BITS: u32 = 56;

impl FixedFormat {
    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self> {
        let f = Self { total_bits, frac_bits };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.frac_bits && self.frac_bits < self.total_bits && self.total_bits <= MAX_TOTAL_BITS) {
            return Err(Error::Config(format!(
                "fixed format needs 1 <= frac_bits < total_bits <= {MAX_TOTAL_BITS}, got {}",
                self
            )));
        }
        Ok(())
    }

    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn min_raw(&self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Raw representation and whether it saturated.
    pub fn quantize(&self, x: f64) -> (i64, bool) {
        let v = (x * self.scale()).round_ties_even();
        if v > self.max_raw() as f64 {
            (self.max_raw(), true)
        } else if v < self.min_raw() as f64 {
            (self.min_raw(), true)
        } else {
            (v as i64, false)
        }
    }

    pub fn dequantize(&self, raw: i64) -> f64 {
        raw as f64 / self.scale()
    }

    fn saturate(&self, v: i128, sat: &mut u64) -> i64 {
        if v > self.max_raw() as i128 {
            *sat += 1;
            self.max_raw()
        } else if v < self.min_raw() as i128 {
            *sat += 1;
            self.min_raw()
        } else {
            v as i64
        }
    }

    /// Converts a product-scale accumulator (`2F` fractional bits) back to the
    /// format.
    fn narrow(&self, acc: i128, sat: &mut u64) -> i64 {
        self.saturate(round_shift(acc, self.frac_bits), sat)
    }

    fn from_f64(&self, x: f64, sat: &mut u64) -> i64 {
        let (v, s) = self.quantize(x);
        *sat += s as u64;
        v
    }
}

/// `v / 2^shift`, rounded half to even.
pub fn round_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let q = v >> shift;
    let r = v - (q << shift);
    let half = 1i128 << (shift - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}.{}", self.total_bits - self.frac_bits, self.frac_bits)
    }
}

impl FromStr for FixedFormat {
    type Err = Error;

    /// `qI.F`: `I` integer bits (sign included) and `F` fractional bits.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("fixed format must look like q6.10, got {s:?}"));
        let body = s.strip_prefix(['q', 'Q']).ok_or_else(bad)?;
        let (i, f) = body.split_once('.').ok_or_else(bad)?;
        let (i, f): (u32, u32) = (i.parse().map_err(|_| bad())?, f.parse().map_err(|_| bad())?);
        Self::new(i + f, f)
    }
}

/// Lorentzian lookup table with linear interpolation, clamped at the ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzianLut {
    pub lo: f64,
    pub hi: f64,
    pub entries: Vec<i64>,
}

pub const LUT_SIZE: usize = 1024;
pub const DEFAULT_LUT_RANGE: f64 = 8.0;

impl LorentzianLut {
    /// Entry `k` holds `sigma(-range + k * range / 512)`, so zero falls on a
    /// grid point and the last entry sits one step below `range`.
    pub fn new(range: f64, fmt: &FixedFormat) -> Self {
        let step = 2.0 * range / LUT_SIZE as f64;
        let (lo, hi) = (-range, range - step);
        Self {
            lo,
            hi,
            entries: (0..LUT_SIZE)
                .map(|k| fmt.quantize(lorentzian(lo + k as f64 * step)).0)
                .collect(),
        }
    }

    fn eval(&self, s: i64, fmt: &FixedFormat) -> i64 {
        let x = fmt.dequantize(s);
        let pos = ((x - self.lo) / (self.hi - self.lo) * (LUT_SIZE - 1) as f64).clamp(0.0, (LUT_SIZE - 1) as f64);
        let k = (pos.floor() as usize).min(LUT_SIZE - 2);
        let frac = pos - k as f64;
        let (a, b) = (self.entries[k] as f64, self.entries[k + 1] as f64);
        (a + (b - a) * frac).round_ties_even() as i64
    }
}

/// A model with every parameter in fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub spec: ModelSpec,
    pub fmt: FixedFormat,
    pub params: Vec<i64>,
    pub offsets: Vec<usize>,
    pub lut: LorentzianLut,
    /// Parameters that did not fit and were clamped.
    pub saturated_params: usize,
}

/// Quantises every stored parameter to `fmt` and builds the Lorentzian table
/// over `[-lut_range, lut_range]`.
pub fn quantize_model(model: &Model, fmt: FixedFormat, lut_range: f64) -> Result<QuantModel> {
    fmt.validate()?;
    if !(lut_range > 0.0 && lut_range.is_finite()) {
        return Err(Error::InvalidArgument(format!("lut range {lut_range}")));
    }
    let mut saturated = 0;
    let params = model
        .params
        .iter()
        .map(|&p| {
            let (v, s) = fmt.quantize(p);
            saturated += s as usize;
            v
        })
        .collect();
    let offsets = (0..model.spec.layers.len()).map(|i| model.layer_range(i).start).collect();
    Ok(QuantModel {
        spec: model.spec.clone(),
        fmt,
        params,
        offsets,
        lut: LorentzianLut::new(lut_range, &fmt),
        saturated_params: saturated,
    })
}

/// Largest PRNN state magnitude seen over the given prepared inputs, padded
/// by 10%, as the table range.
pub fn calibrate_lut_range(model: &Model, inputs: &[Vec<f64>]) -> Result<f64> {
    let mut max = 0.0f64;
    for x in inputs {
        let trace = model.trace(x, &mut crate::model::Mode::<rand_chacha::ChaCha8Rng>::Inference, &mut ())?;
        for i in 0..model.spec.layers.len() {
            if let Some(states) = trace.prnn_states(i) {
                max = states.iter().fold(max, |m, v| m.max(v.abs()));
            }
        }
    }
    Ok(if max > 0.0 { max * 1.1 } else { DEFAULT_LUT_RANGE })
}

/// Fixed-point inference. Returns dequantised log-probabilities and the
/// number of saturated activations.
pub fn fixed_forward(q: &QuantModel, x: &[f64]) -> Result<(Vec<f64>, u64)> {
    let fmt = q.fmt;
    let shapes = q.spec.shapes()?;
    if x.len() != shapes[0].0 * shapes[0].1 {
        return Err(Error::Shape {
            stage: "fixed input",
            detail: format!("expected {} values, got {}", shapes[0].0 * shapes[0].1, x.len()),
        });
    }
    let mut sat = 0u64;
    let one = 1i64 << fmt.frac_bits;
    let mut act: Vec<i64> = x.iter().map(|&v| fmt.from_f64(v, &mut sat)).collect();
    let mut out_f64 = None;
    for (i, layer) in q.spec.layers.iter().enumerate() {
        let p = &q.params[q.offsets[i]..q.offsets[i] + layer.stored_len()];
        let (c, len) = shapes[i];
        act = match *layer {
            LayerSpec::Prnn { inputs, neurons: h, .. } => {
                let (w_in, rest) = p.split_at(h * inputs);
                let (w_rec, rest) = rest.split_at(h * h);
                let (b, alpha) = rest.split_at(h);
                let mut s = vec![0i64; h];
                let mut sig = vec![0i64; h];
                let mut y = vec![0i64; h * len];
                for t in 0..len {
                    for (g, &v) in sig.iter_mut().zip(&s) {
                        *g = q.lut.eval(v, &fmt);
                    }
                    let mut next = vec![0i64; h];
                    for n in 0..h {
                        let mut acc = (b[n] as i128) << fmt.frac_bits;
                        for ch in 0..inputs {
                            acc += w_in[n * inputs + ch] as i128 * act[ch * len + t] as i128;
                        }
                        for j in 0..h {
                            acc += w_rec[n * h + j] as i128 * sig[j] as i128;
                        }
                        let u = fmt.narrow(acc, &mut sat);
                        let a = alpha[n] as i128;
                        let leak = (one as i128 - a) * s[n] as i128 + a * u as i128;
                        next[n] = fmt.narrow(leak, &mut sat);
                    }
                    s = next;
                    for n in 0..h {
                        y[n * len + t] = q.lut.eval(s[n], &fmt);
                    }
                }
                y
            }
            LayerSpec::Conv1d { in_ch, out_ch, kernel, .. } => {
                let (w, b) = p.split_at(out_ch * in_ch * kernel);
                let out_len = len + 1 - kernel;
                let mut y = vec![0i64; out_ch * out_len];
                let mut acc = vec![0i128; out_len];
                for co in 0..out_ch {
                    acc.fill((b[co] as i128) << fmt.frac_bits);
                    for ci in 0..in_ch {
                        let xin = &act[ci * len..(ci + 1) * len];
                        for j in 0..kernel {
                            let wv = w[(co * in_ch + ci) * kernel + j] as i128;
                            for (a, &xv) in acc.iter_mut().zip(&xin[j..j + out_len]) {
                                *a += wv * xv as i128;
                            }
                        }
                    }
                    for (t, &a) in acc.iter().enumerate() {
                        y[co * out_len + t] = fmt.narrow(a, &mut sat);
                    }
                }
                y
            }
            LayerSpec::Dense { inputs, outputs, .. } => {
                let (w, b) = p.split_at(outputs * inputs);
                (0..outputs)
                    .map(|o| {
                        let mut acc = (b[o] as i128) << fmt.frac_bits;
                        for (wv, xv) in w[o * inputs..(o + 1) * inputs].iter().zip(&act) {
                            acc += *wv as i128 * *xv as i128;
                        }
                        fmt.narrow(acc, &mut sat)
                    })
                    .collect()
            }
            LayerSpec::Elu => act
                .iter()
                .map(|&v| if v > 0 { v } else { fmt.from_f64(elu(fmt.dequantize(v)), &mut sat) })
                .collect(),
            LayerSpec::MaxPool2 => (0..c)
                .flat_map(|ch| {
                    let row = &act[ch * len..(ch + 1) * len];
                    (0..len / 2).map(move |k| row[2 * k].max(row[2 * k + 1]))
                })
                .collect(),
            LayerSpec::Dropout { .. } => act,
            LayerSpec::LogSoftmax => {
                // Normalisation is done in floating point; the logits are
                // already fixed-point values.
                let z: Vec<f64> = act.iter().map(|&v| fmt.dequantize(v)).collect();
                let lp = log_softmax(&z);
                out_f64 = Some(lp.clone());
                lp.iter().map(|&v| fmt.from_f64(v, &mut 0)).collect()
            }
        };
    }
    let out = out_f64.unwrap_or_else(|| act.iter().map(|&v| fmt.dequantize(v)).collect());
    Ok((out, sat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationReport {
    pub format: String,
    pub segments: usize,
    pub transmissions: usize,
    pub float_accuracy: f64,
    pub fixed_accuracy: f64,
    /// Percentage points lost in fixed point.
    pub degradation_pp: f64,
    /// Fraction of units whose argmax agrees between the two paths.
    pub unit_agreement: f64,
    pub saturated_params: usize,
    pub saturated_activations: u64,
    pub lut_range: f64,
}

/// Float and fixed-point accuracy of the same checkpoint on the same
/// transmissions. The Lorentzian table range is calibrated on the first
/// transmissions' units.
pub fn emulate(model: &Model, fmt: FixedFormat, ds: &Dataset, positions: &[usize], n: usize) -> Result<EmulationReport> {
    let calib: Vec<Vec<f64>> = positions
        .iter()
        .take(8)
        .flat_map(|&p| (0..UNITS_PER_TX).map(move |u| (p, u)))
        .map(|(p, u)| model.prepare(ds.unit(p, u)))
        .collect::<Result<_>>()?;
    let range = calibrate_lut_range(model, &calib)?;
    let q = quantize_model(model, fmt, range)?;
    let results: Vec<(TxLogProbs, TxLogProbs, u64)> = positions
        .par_iter()
        .map(|&p| {
            let mut fl = Vec::with_capacity(UNITS_PER_TX);
            let mut fx = Vec::with_capacity(UNITS_PER_TX);
            let mut sat = 0;
            for u in 0..UNITS_PER_TX {
                let x = model.prepare(ds.unit(p, u))?;
                fl.push(model.forward(&x)?);
                let (lp, s) = fixed_forward(&q, &x)?;
                fx.push(lp);
                sat += s;
            }
            Ok((fl, fx, sat))
        })
        .collect::<Result<_>>()?;
    let labels = eval::labels_at(ds, positions);
    let fl: Vec<TxLogProbs> = results.iter().map(|r| r.0.clone()).collect();
    let fx: Vec<TxLogProbs> = results.iter().map(|r| r.1.clone()).collect();
    let float_accuracy = eval::evaluate_log_probs(&fl, &labels, ds.num_classes, n)?.accuracy;
    let fixed_accuracy = eval::evaluate_log_probs(&fx, &labels, ds.num_classes, n)?.accuracy;
    let (mut agree, mut total) = (0usize, 0usize);
    for (a, b) in fl.iter().zip(&fx) {
        for (x, y) in a.iter().zip(b) {
            agree += (argmax(x) == argmax(y)) as usize;
            total += 1;
        }
    }
    Ok(EmulationReport {
        format: fmt.to_string(),
        segments: n,
        transmissions: positions.len(),
        float_accuracy,
        fixed_accuracy,
        degradation_pp: 100.0 * (float_accuracy - fixed_accuracy),
        unit_agreement: agree as f64 / total.max(1) as f64,
        saturated_params: q.saturated_params,
        saturated_activations: results.iter().map(|r| r.2).sum(),
        lut_range: range,
    })
}
