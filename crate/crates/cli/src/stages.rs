//! The six pipeline stages. Each takes explicit input and output paths and
//! reads nothing else.

use std::fs;
use std::path::{Path, PathBuf};

use rfprint::dataset::{preprocess_dir, split_dataset, units_path, split_path, Dataset, SplitManifest};
use rfprint::eval::{
    compare_models, evaluate_log_probs, labels_at, noise_sweep, segment_curve, sweep_csv, transmission_log_probs,
    ModelResults, SweepRow,
};
use rfprint::hwmodel::{emulate, estimate, EmulationReport, HwEstimate};
use rfprint::model::{load_checkpoint, save_checkpoint, Model};
use rfprint::train::{history_csv, init_model, train_loop};
use rfprint::waveform::synth::synth_dataset;
use rfprint::waveform::GenConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Arch, PipelineConfig, Provenance};
use crate::error::CliError;

type StageResult<T> = Result<T, CliError>;

/// Pixels per confusion-matrix entry in the PGM rendering.
const PGM_CELL: usize = 8;

fn io_err(path: &Path, e: std::io::Error) -> rfprint::Error {
    rfprint::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(stage: &'static str, path: &Path, bytes: &[u8]) -> StageResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::stage(stage)(io_err(dir, e)))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::stage(stage)(io_err(path, e)))
}

fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> StageResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::stage(stage)(e.into()))?;
    bytes.push(b'\n');
    write(stage, path, &bytes)
}

fn write_csv(stage: &'static str, path: &Path, prov: &Provenance, body: &str) -> StageResult<()> {
    write(stage, path, format!("{}{body}", prov.comment()).as_bytes())
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

/// Raw captures, manifest and device profiles in `raw_dir`.
pub fn generate(cfg: &PipelineConfig, raw_dir: &Path) -> StageResult<usize> {
    const STAGE: &str = "generate";
    let gen = GenConfig {
        output: raw_dir.to_path_buf(),
        ..cfg.generate.clone()
    };
    let manifest = synth_dataset(&gen).map_err(CliError::stage(STAGE))?;
    Ok(manifest.len())
}

/// Unit dataset, split and extraction report in `data_dir`.
pub fn preprocess(cfg: &PipelineConfig, raw_dir: &Path, data_dir: &Path) -> StageResult<usize> {
    const STAGE: &str = "preprocess";
    let err = CliError::stage(STAGE);
    let (ds, report) = preprocess_dir(raw_dir, &cfg.preprocess).map_err(err)?;
    if ds.num_transmissions() == 0 {
        return Err(CliError::stage(STAGE)(rfprint::Error::InvalidArgument(format!(
            "no transmission survived extraction ({} failures)",
            report.failures.len()
        ))));
    }
    let split = split_dataset(&ds.records(), cfg.seeds().split).map_err(CliError::stage(STAGE))?;
    fs::create_dir_all(data_dir).map_err(|e| CliError::stage(STAGE)(io_err(data_dir, e)))?;
    ds.write_file(&units_path(data_dir)).map_err(CliError::stage(STAGE))?;
    split.write_file(&split_path(data_dir)).map_err(CliError::stage(STAGE))?;

    #[derive(Serialize)]
    struct IndexRow<'a> {
        device_id: u8,
        source_tx: u32,
        split: &'a str,
    }
    let mut index = String::new();
    for (id, label) in ds.records() {
        let which = if split.train.binary_search(&id).is_ok() {
            "train"
        } else if split.dev.binary_search(&id).is_ok() {
            "dev"
        } else {
            "test"
        };
        let row = IndexRow {
            device_id: label,
            source_tx: id,
            split: which,
        };
        index.push_str(&serde_json::to_string(&row).expect("row serialises"));
        index.push('\n');
    }
    write(STAGE, &data_dir.join("index.jsonl"), index.as_bytes())?;
    let prov = cfg.provenance();
    write_json(
        STAGE,
        &data_dir.join("preprocess_report.json"),
        &Report {
            provenance: &prov,
            body: &report,
        },
    )?;
    Ok(ds.num_transmissions())
}

fn load_data(stage: &'static str, data_dir: &Path) -> StageResult<(Dataset, SplitManifest)> {
    let ds = Dataset::read_file(&units_path(data_dir)).map_err(CliError::stage(stage))?;
    let split = SplitManifest::read_file(&split_path(data_dir)).map_err(CliError::stage(stage))?;
    Ok((ds, split))
}

/// Baseline checkpoint path next to the main one.
pub fn baseline_path(ckpt: &Path) -> PathBuf {
    ckpt.with_file_name("baseline.json")
}

pub fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_file_name(format!(
        "{}_history.csv",
        ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ))
}

fn train_one(cfg: &PipelineConfig, arch: Arch, ds: &Dataset, split: &SplitManifest, ckpt: &Path) -> StageResult<f64> {
    const STAGE: &str = "train";
    let spec = cfg.model.spec(arch)?;
    let model = init_model(spec, cfg.train.seed).map_err(CliError::stage(STAGE))?;
    let out = train_loop(&cfg.train, model, ds, split).map_err(CliError::stage(STAGE))?;
    let prov = cfg.provenance();
    let meta = serde_json::json!({
        "provenance": prov,
        "best_epoch": out.best_epoch,
        "best_dev_accuracy": out.best_dev_accuracy,
        "epochs_run": out.history.len(),
    });
    save_checkpoint(&out.best, ckpt, meta).map_err(CliError::stage(STAGE))?;
    write_csv(STAGE, &history_path(ckpt), &prov, &history_csv(&out.history))?;
    Ok(out.best_dev_accuracy)
}

/// Trains the configured architecture (and optionally the NRL baseline) and
/// writes checkpoints plus per-epoch history.
pub fn train(cfg: &PipelineConfig, data_dir: &Path, ckpt: &Path) -> StageResult<f64> {
    let (ds, split) = load_data("train", data_dir)?;
    let acc = train_one(cfg, cfg.model.arch, &ds, &split, ckpt)?;
    if cfg.model.baseline {
        train_one(cfg, Arch::NrlCnn, &ds, &split, &baseline_path(ckpt))?;
    }
    Ok(acc)
}

fn test_digest(ds: &Dataset, split: &SplitManifest) -> String {
    let mut h = Sha256::new();
    h.update(ds.digest().as_bytes());
    for id in &split.test {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct EvalBody<'a> {
    arch: &'a str,
    param_count: usize,
    test_transmissions: usize,
    test_digest: &'a str,
    segments: usize,
    accuracy: f64,
    segment_curve: &'a [(usize, f64)],
    confusion_counts: &'a [Vec<u64>],
    confusion_ratios: Vec<Vec<f64>>,
    noise_sweep: &'a [SweepRow],
}

/// Accuracy, confusion matrix, segment curve and AWGN sweep on the test split.
pub fn eval(cfg: &PipelineConfig, ckpt: &Path, data_dir: &Path, out_dir: &Path) -> StageResult<f64> {
    const STAGE: &str = "eval";
    let (model, _) = load_checkpoint(ckpt).map_err(CliError::stage(STAGE))?;
    let (ds, split) = load_data(STAGE, data_dir)?;
    let pos = ds.positions(&split.test).map_err(CliError::stage(STAGE))?;
    let labels = labels_at(&ds, &pos);
    let lp = transmission_log_probs(&model, &ds, &pos).map_err(CliError::stage(STAGE))?;
    let n = cfg.eval.segments;
    let result = evaluate_log_probs(&lp, &labels, ds.num_classes, n).map_err(CliError::stage(STAGE))?;
    let curve = segment_curve(&lp, &labels, ds.num_classes).map_err(CliError::stage(STAGE))?;
    let sweep = if cfg.eval.sweep {
        noise_sweep(&model, &ds, &pos, &cfg.eval.snr_db, cfg.eval.repeats, n, cfg.seeds().sweep)
            .map_err(CliError::stage(STAGE))?
    } else {
        Vec::new()
    };
    let digest = test_digest(&ds, &split);
    let prov = cfg.provenance();
    let body = EvalBody {
        arch: &model.spec.arch,
        param_count: model.param_count(),
        test_transmissions: pos.len(),
        test_digest: &digest,
        segments: n,
        accuracy: result.accuracy,
        segment_curve: &curve,
        confusion_counts: &result.confusion.counts,
        confusion_ratios: result.confusion.ratios(),
        noise_sweep: &sweep,
    };
    write_json(STAGE, &out_dir.join("eval.json"), &Report { provenance: &prov, body })?;
    write_csv(STAGE, &out_dir.join("confusion.csv"), &prov, &result.confusion.to_csv())?;
    let mut segs = String::from("segments,accuracy\n");
    for (k, a) in &curve {
        segs.push_str(&format!("{k},{a:.6}\n"));
    }
    write_csv(STAGE, &out_dir.join("segments.csv"), &prov, &segs)?;
    if cfg.eval.sweep {
        write_csv(STAGE, &out_dir.join("sweep.csv"), &prov, &sweep_csv(&sweep))?;
    }
    let pgm = result.confusion.to_pgm(PGM_CELL);
    // PGM allows comment lines right after the magic number.
    let mut with_comment = b"P5\n".to_vec();
    with_comment.extend_from_slice(prov.comment().as_bytes());
    with_comment.extend_from_slice(&pgm[3..]);
    write(STAGE, &out_dir.join("confusion.pgm"), &with_comment)?;

    let baseline = baseline_path(ckpt);
    if cfg.model.baseline && baseline.exists() {
        let (base, _) = load_checkpoint(&baseline).map_err(CliError::stage(STAGE))?;
        let base_lp = transmission_log_probs(&base, &ds, &pos).map_err(CliError::stage(STAGE))?;
        let base_acc = evaluate_log_probs(&base_lp, &labels, ds.num_classes, n)
            .map_err(CliError::stage(STAGE))?
            .accuracy;
        let results = |m: &Model, acc: f64| -> StageResult<ModelResults> {
            Ok(ModelResults {
                name: m.spec.arch.clone(),
                test_digest: digest.clone(),
                accuracy: acc,
                param_count: m.param_count(),
                hw: estimate(&m.spec, &cfg.hw).map_err(CliError::stage(STAGE))?,
            })
        };
        let cmp = compare_models(&results(&model, result.accuracy)?, &results(&base, base_acc)?)
            .map_err(CliError::stage(STAGE))?;
        write_json(STAGE, &out_dir.join("comparison.json"), &Report { provenance: &prov, body: &cmp })?;
        write_csv(STAGE, &out_dir.join("comparison.csv"), &prov, &cmp.to_csv())?;
    }
    Ok(result.accuracy)
}

#[derive(Serialize)]
struct ArchEstimate {
    arch: String,
    param_count: usize,
    estimate: HwEstimate,
}

#[derive(Serialize)]
struct EstimateBody {
    model: ArchEstimate,
    baseline: ArchEstimate,
    /// Baseline over model for costs, model over baseline for throughput.
    improvement: Improvement,
}

#[derive(Serialize)]
struct Improvement {
    parameters: f64,
    macs: f64,
    energy: f64,
    latency: f64,
    throughput: f64,
}

/// Per-classification MACs, energy, latency and throughput of the model
/// (from `ckpt` if given, else from the configured architecture) next to the
/// NRL baseline.
pub fn estimate_report(cfg: &PipelineConfig, ckpt: Option<&Path>, out_dir: &Path) -> StageResult<f64> {
    const STAGE: &str = "estimate";
    let spec = match ckpt {
        Some(p) => load_checkpoint(p).map_err(CliError::stage(STAGE))?.0.spec,
        None => cfg.model.spec(cfg.model.arch)?,
    };
    let base_spec = cfg.model.spec(Arch::NrlCnn)?;
    let est = |s: &rfprint::model::ModelSpec| -> StageResult<ArchEstimate> {
        Ok(ArchEstimate {
            arch: s.arch.clone(),
            param_count: s.param_count(),
            estimate: estimate(s, &cfg.hw).map_err(CliError::stage(STAGE))?,
        })
    };
    let (m, b) = (est(&spec)?, est(&base_spec)?);
    let improvement = Improvement {
        parameters: b.param_count as f64 / m.param_count as f64,
        macs: b.estimate.macs_per_unit as f64 / m.estimate.macs_per_unit as f64,
        energy: b.estimate.energy_j / m.estimate.energy_j,
        latency: b.estimate.latency_s / m.estimate.latency_s,
        throughput: m.estimate.throughput_per_s / b.estimate.throughput_per_s,
    };
    let mut table = format!("metric,{},{},improvement\n", b.arch, m.arch);
    let rows = [
        ("energy_uj", b.estimate.energy_j * 1e6, m.estimate.energy_j * 1e6, improvement.energy),
        ("latency_us", b.estimate.latency_s * 1e6, m.estimate.latency_s * 1e6, improvement.latency),
        ("throughput_per_s", b.estimate.throughput_per_s, m.estimate.throughput_per_s, improvement.throughput),
        ("macs", b.estimate.macs_per_unit as f64, m.estimate.macs_per_unit as f64, improvement.macs),
        ("parameters", b.param_count as f64, m.param_count as f64, improvement.parameters),
    ];
    for (name, bv, mv, imp) in rows {
        table.push_str(&format!("{name},{bv:.4},{mv:.4},{imp:.4}\n"));
    }
    let mut stages = String::from("arch,stage,macs,lanes,cycles,latency_us\n");
    for a in [&m, &b] {
        for s in &a.estimate.per_stage {
            stages.push_str(&format!(
                "{},{},{},{},{},{:.4}\n",
                a.arch,
                s.stage,
                s.macs,
                s.lanes,
                s.cycles,
                s.latency_s * 1e6
            ));
        }
    }
    let energy = m.estimate.energy_j;
    let prov = cfg.provenance();
    write_csv(STAGE, &out_dir.join("table1.csv"), &prov, &table)?;
    write_csv(STAGE, &out_dir.join("stages.csv"), &prov, &stages)?;
    let body = EstimateBody {
        model: m,
        baseline: b,
        improvement,
    };
    write_json(STAGE, &out_dir.join("estimate.json"), &Report { provenance: &prov, body })?;
    Ok(energy)
}

/// Float against fixed-point accuracy of the checkpoint on the test split.
pub fn emulate_report(cfg: &PipelineConfig, ckpt: &Path, data_dir: &Path, out_dir: &Path) -> StageResult<EmulationReport> {
    const STAGE: &str = "emulate";
    let fmt = cfg.format()?;
    let (model, _) = load_checkpoint(ckpt).map_err(CliError::stage(STAGE))?;
    let (ds, split) = load_data(STAGE, data_dir)?;
    let pos = ds.positions(&split.test).map_err(CliError::stage(STAGE))?;
    let report = emulate(&model, fmt, &ds, &pos, cfg.eval.segments).map_err(CliError::stage(STAGE))?;
    let prov = cfg.provenance();
    write_json(
        STAGE,
        &out_dir.join("emulate.json"),
        &Report {
            provenance: &prov,
            body: &report,
        },
    )?;
    Ok(report)
}
