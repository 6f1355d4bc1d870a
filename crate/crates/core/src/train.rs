//! Training: initialisers, NLL loss, batch gradients, Adam and the epoch loop
//! with dev-driven learning-rate halving.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormStats, SplitManifest, UNITS_PER_TX};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{LayerSpec, Mode, Model, ModelSpec};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_decay: f64,
    pub seed: u64,
    /// Units accumulated per transmission when scoring the dev split.
    pub eval_segments: usize,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    /// Stop once the best dev accuracy reaches this value (default 1.0,
    /// after which the selected checkpoint cannot change). Values above 1
    /// never stop early.
    pub target_dev_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            batch_size: 1700,
            max_epochs: 100,
            patience: 10,
            lr_decay: 0.5,
            seed: 1,
            eval_segments: UNITS_PER_TX,
            grad_clip: None,
            target_dev_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay must be in (0, 1), got {}", self.lr_decay));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("patience, batch_size and max_epochs must be at least 1".into());
        }
        if !(1..=UNITS_PER_TX).contains(&self.eval_segments) {
            return bad(format!("eval_segments must be in 1..=17, got {}", self.eval_segments));
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// Uniform on `[-sqrt(6 / (fan_in + fan_out)), +sqrt(...)]`.
pub fn glorot_uniform_init<R: Rng>(n: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let bound = glorot_bound(fan_in, fan_out);
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Normal with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_init<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Kaiming for the PRNN, Glorot uniform for convolutions and dense layers,
/// zero biases, alpha at its configured start value.
pub fn init_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    let mut model = Model::new(spec)?;
    for i in 0..model.spec.layers.len() {
        let mut rng = seed::rng(seed, &[stream::INIT, i as u64]);
        let range = model.layer_range(i);
        let p = &mut model.params[range];
        match model.spec.layers[i] {
            LayerSpec::Prnn { inputs, neurons, .. } => {
                let w_in = kaiming_init(neurons * inputs, inputs, &mut rng);
                let w_rec = kaiming_init(neurons * neurons, neurons, &mut rng);
                p[..w_in.len()].copy_from_slice(&w_in);
                p[w_in.len()..w_in.len() + w_rec.len()].copy_from_slice(&w_rec);
            }
            LayerSpec::Conv1d { in_ch, out_ch, kernel, .. } => {
                let w = glorot_uniform_init(out_ch * in_ch * kernel, in_ch * kernel, out_ch * kernel, &mut rng);
                p[..w.len()].copy_from_slice(&w);
            }
            LayerSpec::Dense { inputs, outputs, .. } => {
                let w = glorot_uniform_init(outputs * inputs, inputs, outputs, &mut rng);
                p[..w.len()].copy_from_slice(&w);
            }
            _ => {}
        }
    }
    Ok(model)
}

/// Mean of `-log_probs[i][label_i]`.
pub fn nll_loss(log_probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if log_probs.is_empty() || log_probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            log_probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (lp, &l) in log_probs.iter().zip(labels) {
        let v = lp
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} outside {} classes", lp.len())))?;
        total -= v;
    }
    Ok(total / labels.len() as f64)
}

/// Units reduced sequentially inside one work chunk; chunk results are then
/// summed in chunk order, so gradients do not depend on the thread count.
const REDUCTION_CHUNK: usize = 64;

/// One training example: a prepared input and its label, plus the seed of its
/// dropout mask.
pub struct Example {
    pub x: Vec<f64>,
    pub label: usize,
    pub dropout_seed: u64,
}

/// Mean NLL over `batch` and its exact gradient with respect to every stored
/// parameter (frozen entries get zero).
pub fn backward(model: &Model, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let classes = model.spec.num_classes();
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; model.params.len()];
            let mut loss = 0.0;
            let mut dout = vec![0.0; classes];
            for ex in chunk {
                if ex.label >= classes {
                    return Err(Error::InvalidArgument(format!("label {} outside {classes} classes", ex.label)));
                }
                let mut rng = seed::rng(ex.dropout_seed, &[]);
                let trace = model.trace(&ex.x, &mut Mode::Train(&mut rng), &mut ())?;
                let out = trace.acts.last().expect("output");
                loss -= out[ex.label];
                dout.fill(0.0);
                dout[ex.label] = -scale;
                model.backward(&trace, &dout, &mut grad);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params.len()];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss * scale, grad))
}

/// Worst relative disagreement between [`backward`] and central finite
/// differences of the mean loss, over the parameter indices in `indices`.
/// Pairs where both magnitudes fall below `floor` are compared absolutely.
pub fn gradient_check(model: &Model, batch: &[Example], indices: &[usize], h: f64, floor: f64) -> Result<f64> {
    let (_, grad) = backward(model, batch)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let (plus, _) = backward(&probe, batch)?;
        probe.params[i] = orig - h;
        let (minus, _) = backward(&probe, batch)?;
        probe.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update. Entries with `mask[i] == false` are left alone.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, mask: &[bool]) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || mask.len() != n {
        return Err(Error::Length {
            context: "adam step",
            expected: n,
            actual: grads.len(),
        });
    }
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Keeps the leak rates inside `(0, 1]` after an update.
fn clamp_alpha(model: &mut Model) {
    for i in 0..model.spec.layers.len() {
        if let LayerSpec::Prnn { inputs, neurons, .. } = model.spec.layers[i] {
            let start = model.layer_range(i).start + neurons * inputs + neurons * neurons + neurons;
            for a in &mut model.params[start..start + neurons] {
                *a = a.clamp(1e-3, 1.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best dev epoch, rounded to binary32.
    pub best: Model,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,dev_acc,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{:.6},{:.6},{:e}", r.epoch, r.train_loss, r.dev_acc, r.lr);
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord], header: &str) -> Result<()> {
    let body = format!("{header}{}", history_csv(history));
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Learning-rate decay on stalled dev accuracy: after `patience` epochs
/// without a strict improvement over the running best, the rate is multiplied
/// by `lr_decay` and the counter restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub best: Option<f64>,
    since_best: usize,
    patience: usize,
    decay: f64,
}

impl LrSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.lr0,
            best: None,
            since_best: 0,
            patience: config.patience,
            decay: config.lr_decay,
        }
    }

    /// Records one epoch's dev accuracy; true if it is a new best.
    pub fn observe(&mut self, dev_acc: f64) -> bool {
        if self.best.is_none_or(|b| dev_acc > b) {
            self.best = Some(dev_acc);
            self.since_best = 0;
            return true;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            self.lr *= self.decay;
            self.since_best = 0;
        }
        false
    }
}

/// Trains `model` (already initialised) on the train split, selecting the
/// epoch with the best dev accuracy. Normalisation statistics are computed
/// from the train split and stored in the model.
pub fn train_loop(config: &TrainConfig, mut model: Model, ds: &Dataset, split: &SplitManifest) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.dev.is_empty() {
        return Err(Error::InvalidArgument("train and dev splits must be non-empty".into()));
    }
    let train_pos = ds.positions(&split.train)?;
    let dev_pos = ds.positions(&split.dev)?;
    model.norm = NormStats::compute(ds, &train_pos)?;
    let mask = model.trainable_mask();
    let mut adam = AdamState::new(model.params.len());
    let mut units: Vec<(usize, usize)> = train_pos
        .iter()
        .flat_map(|&p| (0..UNITS_PER_TX).map(move |n| (p, n)))
        .collect();

    let mut schedule = LrSchedule::new(config);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut history = Vec::new();
    for epoch in 0..config.max_epochs {
        units.sort_unstable();
        units.shuffle(&mut seed::rng(config.seed, &[stream::SHUFFLE, epoch as u64]));
        let lr = schedule.lr;
        let mut loss_sum = 0.0;
        for (b, batch) in units.chunks(config.batch_size).enumerate() {
            let examples: Vec<Example> = batch
                .iter()
                .enumerate()
                .map(|(k, &(p, n))| {
                    Ok(Example {
                        x: model.prepare(ds.unit(p, n))?,
                        label: ds.labels()[p] as usize,
                        dropout_seed: seed::derive(config.seed, &[stream::DROPOUT, epoch as u64, b as u64, k as u64]),
                    })
                })
                .collect::<Result<_>>()?;
            let (loss, mut grad) = backward(&model, &examples)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!("training diverged at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            if let Some(clip) = config.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / norm);
                }
            }
            adam_step(&mut model.params, &grad, &mut adam, lr, &mask)?;
            clamp_alpha(&mut model);
        }
        let dev_acc = eval::accuracy(&model, ds, &dev_pos, config.eval_segments)?;
        let train_loss = loss_sum / units.len() as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.4}, dev accuracy {dev_acc:.4}, lr {lr:e}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_acc,
            lr,
        });
        if schedule.observe(dev_acc) {
            let mut snapshot = model.clone();
            snapshot.round_to_f32();
            best = Some((dev_acc, epoch, snapshot));
        }
        // A perfect dev score can never be strictly improved on, so the
        // selected checkpoint is final.
        let target = config.target_dev_accuracy.unwrap_or(1.0);
        if best.as_ref().is_some_and(|(acc, _, _)| *acc >= target) {
            break;
        }
    }
    let (best_dev_accuracy, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dev_accuracy,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PrnnCnnConfig;

    #[test]
    fn glorot_bound_and_support() {
        assert!((glorot_bound(96, 30) - 0.21822).abs() < 1e-5);
        let mut rng = seed::rng(3, &[]);
        let w = glorot_uniform_init(10_000, 96, 30, &mut rng);
        let bound = glorot_bound(96, 30);
        assert!(w.iter().all(|v| v.abs() <= bound));
        // Uniform on [-b, b] has std b / sqrt(3); the sample mean's std is that over sqrt(n).
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * bound / 3f64.sqrt() / 100.0);
    }

    #[test]
    fn kaiming_std() {
        let mut rng = seed::rng(4, &[]);
        let w = kaiming_init(10_000, 64, &mut rng);
        let target = (2.0f64 / 64.0).sqrt();
        assert!((target - 0.17678).abs() < 1e-5);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std / target - 1.0).abs() < 0.05);
    }

    #[test]
    fn init_zeroes_biases() {
        let m = init_model(ModelSpec::prnn_cnn(&PrnnCnnConfig::default()).unwrap(), 9).unwrap();
        let cell = m.prnn_cell(0);
        assert!(cell.b.iter().all(|&v| v == 0.0));
        assert!(cell.alpha.iter().all(|&v| v == 0.5));
        for i in [1, 4, 7] {
            assert!(m.weights(i).1.iter().all(|&v| v == 0.0));
        }
        assert_eq!(m, init_model(m.spec.clone(), 9).unwrap());
    }

    #[test]
    fn nll_examples() {
        let uniform = vec![vec![-(30f64.ln()); 30]; 3];
        assert!((nll_loss(&uniform, &[0, 5, 29]).unwrap() - 3.4012).abs() < 1e-4);
        let onehot = vec![{
            let mut v = vec![-50.0; 30];
            v[7] = 0.0;
            v
        }];
        assert_eq!(nll_loss(&onehot, &[7]).unwrap(), 0.0);
        let two = vec![vec![-0.5, -2.0], vec![-1.5, -0.1]];
        assert_eq!(nll_loss(&two, &[0, 0]).unwrap(), 1.0);
        assert!(nll_loss(&two, &[0, 2]).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3);
        let mask = vec![true; 3];
        adam_step(&mut p, &[0.0; 3], &mut st, 0.1, &mask).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.01, 0.0], &mut st, 0.1, &mask).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-4);
        assert_eq!(p[2], 0.5);
        let mut frozen = vec![1.0];
        adam_step(&mut frozen, &[1.0], &mut AdamState::new(1), 0.1, &[false]).unwrap();
        assert_eq!(frozen, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 1.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { eval_segments: 18, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
