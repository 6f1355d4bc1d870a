//! Runs the stages in order inside a working directory. Each completed stage
//! leaves a marker holding a key over its configuration and the content of
//! its inputs, plus digests of its outputs; a stage whose key matches and
//! whose outputs are intact is skipped.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::stages;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Preprocess,
    Train,
    Eval,
    Estimate,
    Emulate,
}

pub const ALL_STAGES: [Stage; 6] = [
    Stage::Generate,
    Stage::Preprocess,
    Stage::Train,
    Stage::Eval,
    Stage::Estimate,
    Stage::Emulate,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Estimate => "estimate",
            Stage::Emulate => "emulate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        ALL_STAGES
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// Fixed layout of a working directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn raw(&self) -> PathBuf {
        self.root.join("raw")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model").join("model.json")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join(".stages").join(format!("{stage}.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Marker {
    stage: String,
    key: String,
    /// Output files relative to the working directory, with their digests.
    outputs: Vec<(String, String)>,
}

fn file_digest(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Every regular file below `dir`, sorted, excluding markers.
fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

struct StagePlan {
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn plan(stage: Stage, cfg: &PipelineConfig, l: &Layout) -> StagePlan {
    let ckpt = l.checkpoint();
    let mut ckpts = vec![ckpt.clone(), rfprint::model::checkpoint::blob_path(&ckpt)];
    if cfg.model.baseline {
        let b = stages::baseline_path(&ckpt);
        ckpts.push(rfprint::model::checkpoint::blob_path(&b));
        ckpts.push(b);
    }
    let data = vec![rfprint::dataset::units_path(&l.data()), rfprint::dataset::split_path(&l.data())];
    let reports = l.reports();
    match stage {
        Stage::Generate => StagePlan {
            config: serde_json::json!({ "generate": cfg.generate }),
            inputs: vec![],
            outputs: vec![l.raw()],
        },
        Stage::Preprocess => StagePlan {
            config: serde_json::json!({ "preprocess": cfg.preprocess, "split_seed": cfg.seeds().split }),
            inputs: vec![l.raw()],
            outputs: vec![l.data()],
        },
        Stage::Train => StagePlan {
            config: serde_json::json!({ "model": cfg.model, "train": cfg.train }),
            inputs: data.clone(),
            outputs: vec![l.root.join("model")],
        },
        Stage::Eval => StagePlan {
            config: serde_json::json!({ "eval": cfg.eval, "sweep_seed": cfg.seeds().sweep, "hw": cfg.hw }),
            inputs: [ckpts.clone(), data.clone()].concat(),
            outputs: ["eval.json", "confusion.csv", "confusion.pgm", "segments.csv"]
                .iter()
                .map(|f| reports.join(f))
                .collect(),
        },
        Stage::Estimate => StagePlan {
            config: serde_json::json!({ "hw": cfg.hw, "model": cfg.model }),
            inputs: ckpts.clone(),
            outputs: ["estimate.json", "table1.csv", "stages.csv"].iter().map(|f| reports.join(f)).collect(),
        },
        Stage::Emulate => StagePlan {
            config: serde_json::json!({ "fixed_format": cfg.fixed_format, "segments": cfg.eval.segments }),
            inputs: [ckpts, data].concat(),
            outputs: vec![reports.join("emulate.json")],
        },
    }
}

fn expand(paths: &[PathBuf]) -> Vec<PathBuf> {
    paths
        .iter()
        .flat_map(|p| if p.is_dir() { files_under(p) } else { vec![p.clone()] })
        .collect()
}

fn relative(l: &Layout, p: &Path) -> String {
    p.strip_prefix(&l.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn stage_key(stage: Stage, plan: &StagePlan, l: &Layout) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update(serde_json::to_vec(&plan.config).expect("config serialises"));
    for p in expand(&plan.inputs) {
        let d = file_digest(&p).map_err(|e| io_stage(stage, &p, e))?;
        h.update(relative(l, &p).as_bytes());
        h.update(d.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn io_stage(stage: Stage, path: &Path, e: std::io::Error) -> CliError {
    CliError::Stage {
        stage: stage.name(),
        source: rfprint::Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

fn output_digests(stage: Stage, plan: &StagePlan, l: &Layout) -> Result<Vec<(String, String)>, CliError> {
    expand(&plan.outputs)
        .iter()
        .map(|p| Ok((relative(l, p), file_digest(p).map_err(|e| io_stage(stage, p, e))?)))
        .collect()
}

fn up_to_date(marker: &Marker, key: &str, l: &Layout) -> bool {
    marker.key == key
        && !marker.outputs.is_empty()
        && marker
            .outputs
            .iter()
            .all(|(rel, d)| file_digest(&l.root.join(rel)).is_ok_and(|got| &got == d))
}

fn run_stage(stage: Stage, cfg: &PipelineConfig, l: &Layout) -> Result<(), CliError> {
    let ckpt = l.checkpoint();
    match stage {
        Stage::Generate => stages::generate(cfg, &l.raw()).map(|_| ()),
        Stage::Preprocess => stages::preprocess(cfg, &l.raw(), &l.data()).map(|_| ()),
        Stage::Train => stages::train(cfg, &l.data(), &ckpt).map(|_| ()),
        Stage::Eval => stages::eval(cfg, &ckpt, &l.data(), &l.reports()).map(|_| ()),
        Stage::Estimate => stages::estimate_report(cfg, Some(&ckpt), &l.reports()).map(|_| ()),
        Stage::Emulate => stages::emulate_report(cfg, &ckpt, &l.data(), &l.reports()).map(|_| ()),
    }
}

/// Runs `selected` stages in pipeline order. With `force`, markers are
/// ignored.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    workdir: &Path,
    selected: &[Stage],
    force: bool,
) -> Result<Vec<(Stage, Outcome)>, CliError> {
    let l = Layout::new(workdir);
    fs::create_dir_all(l.root.join(".stages"))
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", workdir.display())))?;
    let mut order = selected.to_vec();
    order.sort();
    order.dedup();
    let mut outcomes = Vec::new();
    for stage in order {
        let plan = plan(stage, cfg, &l);
        let key = stage_key(stage, &plan, &l)?;
        let marker_path = l.marker(stage);
        let previous: Option<Marker> = fs::read(&marker_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        if !force && previous.as_ref().is_some_and(|m| up_to_date(m, &key, &l)) {
            log::info!("{stage}: up to date, skipping");
            outcomes.push((stage, Outcome::Skipped));
            continue;
        }
        log::info!("{stage}: running");
        let _ = fs::remove_file(&marker_path);
        run_stage(stage, cfg, &l)?;
        let marker = Marker {
            stage: stage.name().into(),
            key,
            outputs: output_digests(stage, &plan, &l)?,
        };
        let bytes = serde_json::to_vec_pretty(&marker).expect("marker serialises");
        fs::write(&marker_path, bytes).map_err(|e| io_stage(stage, &marker_path, e))?;
        outcomes.push((stage, Outcome::Ran));
    }
    Ok(outcomes)
}
