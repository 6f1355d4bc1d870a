//! Evaluation: transmission-level accuracy with log-probability accumulation,
//! confusion matrices, segment-count curves, AWGN sweeps and model
//! comparison tables.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, UNITS_PER_TX};
use crate::error::{Error, Result};
use crate::hwmodel::HwEstimate;
use crate::model::{accumulate_logprob, Model};
use crate::seed::{self, stream};

/// Per transmission, the log-probabilities of its 17 units.
pub type TxLogProbs = Vec<Vec<f64>>;

/// Runs the model over every unit of the given transmissions.
pub fn transmission_log_probs(model: &Model, ds: &Dataset, positions: &[usize]) -> Result<Vec<TxLogProbs>> {
    positions
        .par_iter()
        .map(|&p| (0..UNITS_PER_TX).map(|n| model.log_probs(ds.unit(p, n))).collect())
        .collect()
}

/// `counts[i][j]`: transmissions of device `j` predicted as device `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, predicted: usize, target: usize) {
        self.counts[predicted][target] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|j| self.counts[j][j]).sum()
    }

    /// Transmissions of each target device (column sums).
    pub fn target_counts(&self) -> Vec<u64> {
        (0..self.classes())
            .map(|j| self.counts.iter().map(|row| row[j]).sum())
            .collect()
    }

    /// `M_ij = N_i^pre / N_j^tar`.
    pub fn ratios(&self) -> Vec<Vec<f64>> {
        let tar = self.target_counts();
        self.counts
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&tar)
                    .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                    .collect()
            })
            .collect()
    }

    /// Binary PGM with `cell` pixels per entry; white is a ratio of 1.
    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let n = self.classes();
        let side = n * cell;
        let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
        let m = self.ratios();
        for y in 0..side {
            for x in 0..side {
                out.push((m[y / cell][x / cell].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("predicted\\target");
        for j in 0..self.classes() {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{i}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub segments: usize,
    pub accuracy: f64,
    pub transmissions: usize,
    pub confusion: ConfusionMatrix,
}

/// Scores precomputed per-unit log-probabilities with `n` segments.
pub fn evaluate_log_probs(log_probs: &[TxLogProbs], labels: &[usize], classes: usize, n: usize) -> Result<EvalResult> {
    if log_probs.len() != labels.len() || log_probs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} transmissions for {} labels",
            log_probs.len(),
            labels.len()
        )));
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (lp, &label) in log_probs.iter().zip(labels) {
        let (_, pred) = accumulate_logprob(lp, n)?;
        if label >= classes || pred >= classes {
            return Err(Error::InvalidArgument(format!("class {} outside {classes}", label.max(pred))));
        }
        confusion.record(pred, label);
    }
    Ok(EvalResult {
        segments: n,
        accuracy: confusion.correct() as f64 / confusion.total() as f64,
        transmissions: labels.len(),
        confusion,
    })
}

/// Accuracy and confusion over the transmissions at `positions`, accumulating
/// the first `n` units of each.
pub fn evaluate(model: &Model, ds: &Dataset, positions: &[usize], n: usize) -> Result<EvalResult> {
    if !(1..=UNITS_PER_TX).contains(&n) {
        return Err(Error::InvalidArgument(format!("segment count {n} outside 1..=17")));
    }
    let lp = transmission_log_probs(model, ds, positions)?;
    evaluate_log_probs(&lp, &labels_at(ds, positions), ds.num_classes, n)
}

pub fn accuracy(model: &Model, ds: &Dataset, positions: &[usize], n: usize) -> Result<f64> {
    Ok(evaluate(model, ds, positions, n)?.accuracy)
}

pub fn labels_at(ds: &Dataset, positions: &[usize]) -> Vec<usize> {
    positions.iter().map(|&p| ds.labels()[p] as usize).collect()
}

/// Accuracy for every segment count `1..=17`.
pub fn segment_curve(log_probs: &[TxLogProbs], labels: &[usize], classes: usize) -> Result<Vec<(usize, f64)>> {
    (1..=UNITS_PER_TX)
        .map(|n| Ok((n, evaluate_log_probs(log_probs, labels, classes, n)?.accuracy)))
        .collect()
}

/// `-30, -25, ..., 30` dB.
pub fn default_snr_grid() -> Vec<f64> {
    (-6..=6).map(|k| 5.0 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` stands for the noise-free sentinel.
    pub snr_db: Option<f64>,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Adds white Gaussian noise to a raw unit. The SNR is relative to the
/// unit's own mean power, noise split evenly between I and Q.
pub fn noisy_unit<R: Rng>(raw: &[f32], snr_db: f64, rng: &mut R) -> Vec<f32> {
    let power = raw.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / raw.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    raw.iter()
        .map(|&v| (v as f64 + sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

/// Accuracy under fresh AWGN on every test unit, `repeats` times per SNR.
/// Non-finite SNR values are evaluated without noise.
pub fn noise_sweep(
    model: &Model,
    ds: &Dataset,
    positions: &[usize],
    snr_list: &[f64],
    repeats: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let labels = labels_at(ds, positions);
    let mut rows = Vec::with_capacity(snr_list.len());
    for (si, &snr) in snr_list.iter().enumerate() {
        let clean = !snr.is_finite();
        let mut accs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let lp: Vec<TxLogProbs> = positions
                .par_iter()
                .map(|&p| {
                    (0..n)
                        .map(|u| {
                            if clean {
                                return model.log_probs(ds.unit(p, u));
                            }
                            let mut rng = seed::rng(seed, &[stream::SWEEP, si as u64, r as u64, p as u64, u as u64]);
                            model.log_probs(&noisy_unit(ds.unit(p, u), snr, &mut rng))
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            accs.push(evaluate_log_probs(&lp, &labels, ds.num_classes, n)?.accuracy);
            if clean {
                break;
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
        rows.push(SweepRow {
            snr_db: if clean { None } else { Some(snr) },
            mean,
            std,
            accuracies: accs,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("snr_db,mean_accuracy,std_accuracy,repeats\n");
    for r in rows {
        let snr = r.snr_db.map_or("inf".to_string(), |v| format!("{v}"));
        let _ = writeln!(s, "{snr},{:.6},{:.6},{}", r.mean, r.std, r.accuracies.len());
    }
    s
}

/// Everything reported about one trained model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResults {
    pub name: String,
    pub test_digest: String,
    pub accuracy: f64,
    pub param_count: usize,
    pub hw: HwEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub difference: f64,
    /// How many times better `a` is than `b`: `b / a` for costs, `a / b`
    /// for accuracy and throughput.
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = format!("metric,{},{},difference,improvement\n", self.a, self.b);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.metric, r.a, r.b, r.difference, r.improvement);
        }
        s
    }

    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

/// Side-by-side table of `a` (the proposed model) against `b` (the
/// baseline), in the layout of a per-classification cost table.
pub fn compare_models(a: &ModelResults, b: &ModelResults) -> Result<Comparison> {
    if a.test_digest != b.test_digest {
        return Err(Error::InvalidArgument(format!(
            "results come from different test sets ({} vs {})",
            a.test_digest, b.test_digest
        )));
    }
    let ratio = |num: f64, den: f64| if den == 0.0 { f64::NAN } else { num / den };
    let cost = |metric: &str, x: f64, y: f64| ComparisonRow {
        metric: metric.into(),
        a: x,
        b: y,
        difference: x - y,
        improvement: ratio(y, x),
    };
    let benefit = |metric: &str, x: f64, y: f64| ComparisonRow {
        metric: metric.into(),
        a: x,
        b: y,
        difference: x - y,
        improvement: ratio(x, y),
    };
    Ok(Comparison {
        a: a.name.clone(),
        b: b.name.clone(),
        rows: vec![
            benefit("accuracy", a.accuracy, b.accuracy),
            cost("parameters", a.param_count as f64, b.param_count as f64),
            cost("macs", a.hw.macs_per_unit as f64, b.hw.macs_per_unit as f64),
            cost("energy_uj", a.hw.energy_j * 1e6, b.hw.energy_j * 1e6),
            cost("latency_us", a.hw.latency_s * 1e6, b.hw.latency_s * 1e6),
            benefit("throughput_per_s", a.hw.throughput_per_s, b.hw.throughput_per_s),
        ],
    })
}
