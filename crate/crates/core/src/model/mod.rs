//! The PRNN-CNN classifier and the NRL CNN baseline.
//!
//! Both networks are a [`ModelSpec`] (an ordered list of layers) plus a flat
//! parameter vector laid out in layer order. Forward passes record a
//! [`Trace`] that [`Model::backward`] turns into exact gradients.

pub mod checkpoint;
pub mod ops;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, NormStats, UNIT_LEN};
use crate::error::{Error, Result};
use ops::{MacMeter, PrnnCache, PrnnCell, PrnnGrad};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use ops::{
    conv1d_valid, dense_logsoftmax, elu, log_softmax, lorentzian, maxpool2, prnn_forward,
    prnn_step,
};

/// One network layer. Parametric layers carry the name used in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Prnn {
        name: String,
        inputs: usize,
        neurons: usize,
        alpha_trainable: bool,
        alpha_init: f64,
    },
    Conv1d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Elu,
    MaxPool2,
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Dropout {
        rate: f64,
    },
    LogSoftmax,
}

impl LayerSpec {
    pub fn name(&self) -> Option<&str> {
        match self {
            Self::Prnn { name, .. } | Self::Conv1d { name, .. } | Self::Dense { name, .. } => {
                Some(name)
            }
            _ => None,
        }
    }

    /// Values stored for this layer (including a frozen alpha).
    pub fn stored_len(&self) -> usize {
        match *self {
            Self::Prnn { inputs, neurons, .. } => neurons * inputs + neurons * neurons + 2 * neurons,
            Self::Conv1d { in_ch, out_ch, kernel, .. } => out_ch * in_ch * kernel + out_ch,
            Self::Dense { inputs, outputs, .. } => outputs * inputs + outputs,
            _ => 0,
        }
    }

    /// Trainable parameters.
    pub fn param_count(&self) -> usize {
        match *self {
            Self::Prnn { neurons, alpha_trainable, .. } => {
                self.stored_len() - if alpha_trainable { 0 } else { neurons }
            }
            _ => self.stored_len(),
        }
    }

    /// Named parameter tensors and their shapes, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Self::Prnn { inputs, neurons, .. } => vec![
                ("w_in", vec![neurons, inputs]),
                ("w_rec", vec![neurons, neurons]),
                ("b", vec![neurons]),
                ("alpha", vec![neurons]),
            ],
            Self::Conv1d { in_ch, out_ch, kernel, .. } => {
                vec![("w", vec![out_ch, in_ch, kernel]), ("b", vec![out_ch])]
            }
            Self::Dense { inputs, outputs, .. } => vec![("w", vec![outputs, inputs]), ("b", vec![outputs])],
            _ => Vec::new(),
        }
    }
}

/// How a raw `64 x 32` data unit is presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLayout {
    /// The reshaped unit itself, 64 channels by 32 steps.
    Unit,
    /// The two I/Q planes of 1,024 samples.
    Planes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: String,
    pub input_channels: usize,
    pub input_len: usize,
    pub layout: InputLayout,
    pub layers: Vec<LayerSpec>,
}

/// PRNN-CNN hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrnnCnnConfig {
    pub inputs: usize,
    pub steps: usize,
    pub neurons: usize,
    pub conv1: (usize, usize),
    pub conv2: (usize, usize),
    pub classes: usize,
    pub alpha_trainable: bool,
    pub alpha_init: f64,
}

impl Default for PrnnCnnConfig {
    fn default() -> Self {
        Self {
            inputs: 64,
            steps: 32,
            neurons: 16,
            conv1: (16, 5),
            conv2: (16, 3),
            classes: 30,
            alpha_trainable: true,
            alpha_init: 0.5,
        }
    }
}

impl PrnnCnnConfig {
    /// Small variant for gradient checks: 4 inputs, 2 neurons, 8 steps.
    pub fn tiny() -> Self {
        Self {
            inputs: 4,
            steps: 8,
            neurons: 2,
            conv1: (3, 3),
            conv2: (3, 2),
            classes: 5,
            alpha_trainable: true,
            alpha_init: 0.5,
        }
    }
}

/// NRL CNN baseline hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NrlConfig {
    pub input_len: usize,
    /// `(out_channels, kernel)` per convolution.
    pub convs: Vec<(usize, usize)>,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for NrlConfig {
    fn default() -> Self {
        Self {
            input_len: 1024,
            convs: vec![(128, 19), (32, 15), (16, 11)],
            hidden: vec![128, 64],
            classes: 30,
            dropout: 0.5,
        }
    }
}

impl NrlConfig {
    pub fn tiny() -> Self {
        Self {
            input_len: 40,
            convs: vec![(3, 5), (2, 3), (2, 3)],
            hidden: vec![4, 3],
            classes: 5,
            dropout: 0.5,
        }
    }
}

impl ModelSpec {
    pub fn prnn_cnn(cfg: &PrnnCnnConfig) -> Result<Self> {
        let (n, steps) = (cfg.neurons, cfg.steps);
        let l1 = steps.checked_sub(cfg.conv1.1).map(|v| (v + 1) / 2).unwrap_or(0);
        let l2 = l1.checked_sub(cfg.conv2.1).map(|v| (v + 1) / 2).unwrap_or(0);
        let spec = Self {
            arch: "prnn_cnn".into(),
            input_channels: cfg.inputs,
            input_len: steps,
            layout: InputLayout::Unit,
            layers: vec![
                LayerSpec::Prnn {
                    name: "prnn".into(),
                    inputs: cfg.inputs,
                    neurons: n,
                    alpha_trainable: cfg.alpha_trainable,
                    alpha_init: cfg.alpha_init,
                },
                LayerSpec::Conv1d {
                    name: "conv1".into(),
                    in_ch: n,
                    out_ch: cfg.conv1.0,
                    kernel: cfg.conv1.1,
                },
                LayerSpec::Elu,
                LayerSpec::MaxPool2,
                LayerSpec::Conv1d {
                    name: "conv2".into(),
                    in_ch: cfg.conv1.0,
                    out_ch: cfg.conv2.0,
                    kernel: cfg.conv2.1,
                },
                LayerSpec::Elu,
                LayerSpec::MaxPool2,
                LayerSpec::Dense {
                    name: "fc".into(),
                    inputs: cfg.conv2.0 * l2,
                    outputs: cfg.classes,
                },
                LayerSpec::LogSoftmax,
            ],
        };
        spec.shapes()?;
        Ok(spec)
    }

    pub fn nrl(cfg: &NrlConfig) -> Result<Self> {
        let mut layers = Vec::new();
        let (mut ch, mut len) = (2usize, cfg.input_len);
        for (i, &(out, k)) in cfg.convs.iter().enumerate() {
            layers.push(LayerSpec::Conv1d {
                name: format!("conv{}", i + 1),
                in_ch: ch,
                out_ch: out,
                kernel: k,
            });
            layers.push(LayerSpec::Elu);
            layers.push(LayerSpec::MaxPool2);
            ch = out;
            len = len.saturating_sub(k.saturating_sub(1)) / 2;
        }
        let mut width = ch * len;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            layers.push(LayerSpec::Dense {
                name: format!("fc{}", i + 1),
                inputs: width,
                outputs: h,
            });
            layers.push(LayerSpec::Elu);
            layers.push(LayerSpec::Dropout { rate: cfg.dropout });
            width = h;
        }
        layers.push(LayerSpec::Dense {
            name: format!("fc{}", cfg.hidden.len() + 1),
            inputs: width,
            outputs: cfg.classes,
        });
        layers.push(LayerSpec::LogSoftmax);
        let spec = Self {
            arch: "nrl_cnn".into(),
            input_channels: 2,
            input_len: cfg.input_len,
            layout: InputLayout::Planes,
            layers,
        };
        spec.shapes()?;
        Ok(spec)
    }

    /// `(channels, length)` entering each layer, plus the final output.
    pub fn shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut shape = (self.input_channels, self.input_len);
        let mut out = vec![shape];
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |detail: String| Error::Shape {
                stage: "model construction",
                detail: format!("layer {i} ({}): {detail}", layer.name().unwrap_or("unnamed")),
            };
            shape = match *layer {
                LayerSpec::Prnn { inputs, neurons, alpha_init, .. } => {
                    if shape.0 != inputs {
                        return Err(bad(format!("expects {inputs} channels, got {}", shape.0)));
                    }
                    if !(alpha_init > 0.0 && alpha_init <= 1.0) {
                        return Err(bad(format!("alpha {alpha_init} outside (0, 1]")));
                    }
                    (neurons, shape.1)
                }
                LayerSpec::Conv1d { in_ch, out_ch, kernel, .. } => {
                    if shape.0 != in_ch || shape.1 < kernel || kernel == 0 {
                        return Err(bad(format!(
                            "kernel {out_ch}x{in_ch}x{kernel} on input {}x{}",
                            shape.0, shape.1
                        )));
                    }
                    (out_ch, shape.1 - kernel + 1)
                }
                LayerSpec::MaxPool2 => {
                    if shape.1 < 2 {
                        return Err(bad(format!("pooling length {}", shape.1)));
                    }
                    (shape.0, shape.1 / 2)
                }
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if shape.0 * shape.1 != inputs {
                        return Err(bad(format!("expects {inputs} inputs, got {}", shape.0 * shape.1)));
                    }
                    (outputs, 1)
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(format!("dropout rate {rate}")));
                    }
                    shape
                }
                LayerSpec::Elu | LayerSpec::LogSoftmax => shape,
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        self.shapes().ok().and_then(|s| s.last().map(|s| s.0 * s.1)).unwrap_or(0)
    }

    pub fn stored_len(&self) -> usize {
        self.layers.iter().map(LayerSpec::stored_len).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// `(name, trainable parameters)` of every parametric layer.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .filter_map(|l| l.name().map(|n| (n.to_string(), l.param_count())))
            .collect()
    }
}

/// Parameters plus the input normalisation they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub norm: NormStats,
    offsets: Vec<usize>,
}

/// Forward activations of one example. `acts[i]` enters layer `i`; the last
/// entry is the network output.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
    caches: Vec<Cache>,
}

impl Trace {
    /// PRNN states `s_0..=s_T` (time-major) if layer `i` is recurrent.
    pub fn prnn_states(&self, i: usize) -> Option<&[f64]> {
        match self.caches.get(i) {
            Some(Cache::Prnn(c)) => Some(&c.s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
enum Cache {
    #[default]
    None,
    Prnn(PrnnCache),
    Pool(Vec<u32>),
    Mask(Vec<f64>),
}

/// Dropout behaviour of a forward pass.
pub enum Mode<'a, R: Rng> {
    Inference,
    Train(&'a mut R),
}

impl Model {
    /// Zero weights, alpha at its initial value, identity normalisation.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.shapes()?;
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut off = 0;
        for l in &spec.layers {
            offsets.push(off);
            off += l.stored_len();
        }
        let mut model = Self {
            params: vec![0.0; off],
            norm: NormStats::identity(),
            offsets,
            spec,
        };
        for i in 0..model.spec.layers.len() {
            if let LayerSpec::Prnn { neurons, inputs, alpha_init, .. } = model.spec.layers[i] {
                let start = model.offsets[i] + neurons * inputs + neurons * neurons + neurons;
                model.params[start..start + neurons].fill(alpha_init);
            }
        }
        Ok(model)
    }

    pub fn with_params(spec: ModelSpec, params: Vec<f64>, norm: NormStats) -> Result<Self> {
        let mut m = Self::new(spec)?;
        if params.len() != m.params.len() {
            return Err(Error::Length {
                context: "parameter vector",
                expected: m.params.len(),
                actual: params.len(),
            });
        }
        m.params = params;
        m.norm = norm;
        m.check_alpha()?;
        Ok(m)
    }

    fn check_alpha(&self) -> Result<()> {
        for (i, l) in self.spec.layers.iter().enumerate() {
            if let LayerSpec::Prnn { .. } = l {
                let cell = self.prnn_cell(i);
                if let Some(a) = cell.alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
                    return Err(Error::InvalidArgument(format!("alpha {a} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Storage range of layer `i`.
    pub fn layer_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.spec.layers[i].stored_len()
    }

    /// Mask of trainable entries in the parameter vector.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        for (i, l) in self.spec.layers.iter().enumerate() {
            if let LayerSpec::Prnn { inputs, neurons, alpha_trainable: false, .. } = *l {
                let start = self.offsets[i] + neurons * inputs + neurons * neurons + neurons;
                mask[start..start + neurons].fill(false);
            }
        }
        mask
    }

    pub fn prnn_cell(&self, i: usize) -> PrnnCell<'_> {
        let LayerSpec::Prnn { inputs, neurons, .. } = self.spec.layers[i] else {
            panic!("layer {i} is not a PRNN");
        };
        let p = &self.params[self.layer_range(i)];
        let (w_in, rest) = p.split_at(neurons * inputs);
        let (w_rec, rest) = rest.split_at(neurons * neurons);
        let (b, alpha) = rest.split_at(neurons);
        PrnnCell {
            inputs,
            neurons,
            w_in,
            w_rec,
            b,
            alpha,
        }
    }

    /// Weight and bias slices of a conv or dense layer.
    pub fn weights(&self, i: usize) -> (&[f64], &[f64]) {
        let p = &self.params[self.layer_range(i)];
        let bias = match self.spec.layers[i] {
            LayerSpec::Conv1d { out_ch, .. } => out_ch,
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => panic!("layer {i} has no weight matrix"),
        };
        p.split_at(p.len() - bias)
    }

    /// Normalises a raw `64 x 32` unit and arranges it in the input layout.
    pub fn prepare(&self, raw: &[f32]) -> Result<Vec<f64>> {
        if raw.len() != UNIT_LEN {
            return Err(Error::Shape {
                stage: "input",
                detail: format!("expected {UNIT_LEN} values, got {}", raw.len()),
            });
        }
        let mut x = vec![0.0; UNIT_LEN];
        self.norm.apply(raw, &mut x);
        match self.spec.layout {
            InputLayout::Unit if (self.spec.input_channels, self.spec.input_len) == (64, 32) => Ok(x),
            InputLayout::Planes if self.spec.input_len * 2 == UNIT_LEN => {
                let mut planes = vec![0.0; UNIT_LEN];
                dataset::unit_to_planes(&x, &mut planes);
                Ok(planes)
            }
            _ => Err(Error::Shape {
                stage: "input",
                detail: format!(
                    "model input {}x{} cannot take a 64x32 unit",
                    self.spec.input_channels, self.spec.input_len
                ),
            }),
        }
    }

    /// Log-probabilities of one raw data unit.
    pub fn log_probs(&self, raw: &[f32]) -> Result<Vec<f64>> {
        self.forward(&self.prepare(raw)?)
    }

    /// Inference on an already prepared input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.trace(x, &mut Mode::<rand_chacha::ChaCha8Rng>::Inference, &mut ())?;
        Ok(trace.acts.pop().expect("output"))
    }

    /// Inference counting every multiply-accumulate.
    pub fn forward_counted(&self, x: &[f64]) -> Result<(Vec<f64>, u64)> {
        let mut macs = 0u64;
        let mut trace = self.trace(x, &mut Mode::<rand_chacha::ChaCha8Rng>::Inference, &mut macs)?;
        Ok((trace.acts.pop().expect("output"), macs))
    }

    pub fn trace<R: Rng, M: MacMeter>(&self, x: &[f64], mode: &mut Mode<R>, meter: &mut M) -> Result<Trace> {
        let want = self.spec.input_channels * self.spec.input_len;
        if x.len() != want {
            return Err(Error::Shape {
                stage: "input",
                detail: format!("expected {want} values, got {}", x.len()),
            });
        }
        let shapes = self.spec.shapes()?;
        let mut trace = Trace {
            acts: Vec::with_capacity(self.spec.layers.len() + 1),
            caches: Vec::with_capacity(self.spec.layers.len()),
        };
        trace.acts.push(x.to_vec());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let input = trace.acts.last().expect("input");
            let (c, len) = shapes[i];
            let (out, cache) = match *layer {
                LayerSpec::Prnn { .. } => {
                    let mut cache = PrnnCache::default();
                    let y = ops::prnn_forward_cached(input, len, &self.prnn_cell(i), &mut cache, meter);
                    (y, Cache::Prnn(cache))
                }
                LayerSpec::Conv1d { in_ch, out_ch, kernel, .. } => {
                    let (w, b) = self.weights(i);
                    (ops::conv1d_forward(input, in_ch, len, w, b, out_ch, kernel, meter), Cache::None)
                }
                LayerSpec::Elu => (input.iter().map(|&v| elu(v)).collect(), Cache::None),
                LayerSpec::MaxPool2 => {
                    let (y, idx) = ops::maxpool2_forward(input, c, len);
                    (y, Cache::Pool(idx))
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = self.weights(i);
                    (ops::dense_forward(input, w, b, meter), Cache::None)
                }
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Inference => (input.clone(), Cache::None),
                    Mode::Train(rng) => {
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..input.len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let y = input.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        (y, Cache::Mask(mask))
                    }
                },
                LayerSpec::LogSoftmax => (log_softmax(input), Cache::None),
            };
            trace.acts.push(out);
            trace.caches.push(cache);
        }
        Ok(trace)
    }

    /// Adds the gradient of `sum_k dout[k] * output[k]` with respect to every
    /// stored parameter into `grad`. Frozen entries get zero.
    pub fn backward(&self, trace: &Trace, dout: &[f64], grad: &mut [f64]) {
        let shapes = self.spec.shapes().expect("validated spec");
        let mut g = dout.to_vec();
        for i in (0..self.spec.layers.len()).rev() {
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            let (c, len) = shapes[i];
            let range = self.layer_range(i);
            let want_dx = i > 0;
            g = match (&self.spec.layers[i], &trace.caches[i]) {
                (LayerSpec::Prnn { alpha_trainable, .. }, Cache::Prnn(cache)) => {
                    let cell = self.prnn_cell(i);
                    let (h, ci) = (cell.neurons, cell.inputs);
                    let mut frozen = vec![0.0; h];
                    let gl = &mut grad[range];
                    let (w_in, rest) = gl.split_at_mut(h * ci);
                    let (w_rec, rest) = rest.split_at_mut(h * h);
                    let (b, alpha) = rest.split_at_mut(h);
                    let alpha = if *alpha_trainable { alpha } else { &mut frozen[..] };
                    ops::prnn_backward(input, len, &cell, cache, &g, PrnnGrad { w_in, w_rec, b, alpha });
                    Vec::new()
                }
                (&LayerSpec::Conv1d { in_ch, out_ch, kernel, .. }, _) => {
                    let (w, _) = self.weights(i);
                    let (dw, db) = grad[range].split_at_mut(out_ch * in_ch * kernel);
                    ops::conv1d_backward(input, in_ch, len, w, out_ch, kernel, &g, dw, db, want_dx)
                }
                (LayerSpec::Elu, _) => g
                    .iter()
                    .zip(input)
                    .zip(output)
                    .map(|((d, &z), &a)| if z > 0.0 { *d } else { d * (a + 1.0) })
                    .collect(),
                (LayerSpec::MaxPool2, Cache::Pool(idx)) => {
                    let mut dx = vec![0.0; c * len];
                    for (d, &j) in g.iter().zip(idx) {
                        dx[j as usize] += d;
                    }
                    dx
                }
                (&LayerSpec::Dense { outputs, .. }, _) => {
                    let (w, _) = self.weights(i);
                    let split = grad[range.clone()].len() - outputs;
                    let (dw, db) = grad[range].split_at_mut(split);
                    ops::dense_backward(input, w, &g, dw, db, want_dx)
                }
                (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => {
                    g.iter().zip(mask).map(|(d, m)| d * m).collect()
                }
                (LayerSpec::Dropout { .. }, _) => g,
                (LayerSpec::LogSoftmax, _) => {
                    let total: f64 = g.iter().sum();
                    g.iter().zip(output).map(|(d, o)| d - o.exp() * total).collect()
                }
                (layer, _) => unreachable!("trace does not match layer {layer:?}"),
            };
        }
    }

    /// Rounds every parameter and statistic to binary32, as stored in a
    /// checkpoint.
    pub fn round_to_f32(&mut self) {
        for v in self
            .params
            .iter_mut()
            .chain(self.norm.mean.iter_mut())
            .chain(self.norm.std.iter_mut())
        {
            *v = *v as f32 as f64;
        }
    }
}

/// PRNN-CNN inference on a prepared `64 x 32` unit.
pub fn forward(model: &Model, unit: &[f64]) -> Result<Vec<f64>> {
    if model.spec.arch != "prnn_cnn" {
        return Err(Error::InvalidArgument(format!("{} is not a PRNN-CNN", model.spec.arch)));
    }
    model.forward(unit)
}

/// NRL inference on a prepared `2 x 1024` input.
pub fn forward_nrl(model: &Model, z: &[f64]) -> Result<Vec<f64>> {
    if model.spec.arch != "nrl_cnn" {
        return Err(Error::InvalidArgument(format!("{} is not an NRL CNN", model.spec.arch)));
    }
    model.forward(z)
}

/// Sums the first `n` per-unit log-probability vectors; the prediction is the
/// argmax with ties going to the lowest class.
pub fn accumulate_logprob(per_unit: &[Vec<f64>], n: usize) -> Result<(Vec<f64>, usize)> {
    if n == 0 || n > dataset::UNITS_PER_TX || n > per_unit.len() {
        return Err(Error::InvalidArgument(format!(
            "segment count {n} outside 1..={} (have {})",
            dataset::UNITS_PER_TX,
            per_unit.len()
        )));
    }
    let mut sum = per_unit[0].clone();
    for v in &per_unit[1..n] {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    Ok((sum.clone(), argmax(&sum)))
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prnn_cnn_counts() {
        let spec = ModelSpec::prnn_cnn(&PrnnCnnConfig::default()).unwrap();
        assert_eq!(spec.param_count(), 6302);
        let counts: Vec<usize> = spec.layer_param_counts().into_iter().map(|(_, c)| c).collect();
        assert_eq!(counts, vec![1312, 1296, 784, 2910]);
        let frozen = ModelSpec::prnn_cnn(&PrnnCnnConfig {
            alpha_trainable: false,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(frozen.param_count(), 6286);
        assert_eq!(frozen.layer_param_counts()[0].1, 1296);
    }

    #[test]
    fn prnn_cnn_shape_chain() {
        let spec = ModelSpec::prnn_cnn(&PrnnCnnConfig::default()).unwrap();
        let lens: Vec<(usize, usize)> = spec.shapes().unwrap();
        assert_eq!(
            lens,
            vec![(64, 32), (16, 32), (16, 28), (16, 28), (16, 14), (16, 12), (16, 12), (16, 6), (30, 1), (30, 1)]
        );
        let bad = ModelSpec::prnn_cnn(&PrnnCnnConfig {
            steps: 30,
            ..Default::default()
        });
        assert!(bad.is_ok());
        let mut spec = spec;
        spec.layers[7] = LayerSpec::Dense {
            name: "fc".into(),
            inputs: 100,
            outputs: 30,
        };
        assert!(matches!(spec.shapes(), Err(Error::Shape { .. })));
    }

    #[test]
    fn nrl_counts_and_shapes() {
        let spec = ModelSpec::nrl(&NrlConfig::default()).unwrap();
        let counts: Vec<usize> = spec.layer_param_counts().into_iter().map(|(_, c)| c).collect();
        assert_eq!(counts, vec![4992, 61472, 5648, 239744, 8256, 1950]);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], (128, 1006));
        assert_eq!(shapes[9], (16, 117));
    }

    #[test]
    fn zero_model_is_uniform_and_pure() {
        let model = Model::new(ModelSpec::prnn_cnn(&PrnnCnnConfig::default()).unwrap()).unwrap();
        let x: Vec<f64> = (0..UNIT_LEN).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = forward(&model, &x).unwrap();
        assert_eq!(out.len(), 30);
        assert!(out.iter().all(|v| (v + 30f64.ln()).abs() < 1e-12));
        assert_eq!(forward(&model, &x).unwrap(), out);
        assert!(forward(&model, &x[1..]).is_err());
        assert!(forward_nrl(&model, &x).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let a = vec![-1.0, -0.5, -3.0];
        let b = vec![-0.2, -2.0, -0.1];
        assert_eq!(accumulate_logprob(&[a.clone()], 1).unwrap().1, 1);
        let (sum, arg) = accumulate_logprob(&[a.clone(), b.clone()], 2).unwrap();
        assert_eq!(sum, vec![-1.2, -2.5, -3.1]);
        assert_eq!(arg, 0);
        let (swapped, _) = accumulate_logprob(&[b, a.clone()], 2).unwrap();
        assert_eq!(sum, swapped);
        let rep = vec![a.clone(); 17];
        for n in 1..=17 {
            assert_eq!(accumulate_logprob(&rep, n).unwrap().1, 1);
        }
        assert!(accumulate_logprob(&rep, 0).is_err());
        assert!(accumulate_logprob(&[a], 2).is_err());
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
