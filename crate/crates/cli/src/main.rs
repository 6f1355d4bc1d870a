use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfprint::hwmodel::HwConfig;
use rfprint_cli::pipeline::Outcome;
use rfprint_cli::{init_workers, run_pipeline, stages, Arch, CliError, PipelineConfig, Stage, ALL_STAGES};

/// ZigBee RF fingerprinting: synthetic captures, residual extraction, PRNN-CNN
/// training and hardware cost estimates.
#[derive(Parser)]
#[command(name = "rfprint", version)]
struct Cli {
    /// JSON pipeline configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every other seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize raw IQ captures and a manifest.
    Generate {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        devices: Option<u32>,
        #[arg(long)]
        per_device: Option<u32>,
        /// Receiver SNR in dB; omitted means noise-free.
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Extract residual units and split them.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        min_gap: Option<usize>,
    },
    /// Train a classifier on a preprocessed dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Accuracy, confusion matrix, segment curve and noise sweep.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        no_sweep: bool,
    },
    /// MAC, energy, latency and throughput estimates.
    Estimate {
        /// Checkpoint; without it the configured architecture is used.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Hardware configuration JSON.
        #[arg(long)]
        hw: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-point against float accuracy.
    Emulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fixed-point format such as q6.10.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the stages in a working directory, skipping up-to-date ones.
    Pipeline {
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Comma-separated subset of generate,preprocess,train,eval,estimate,emulate.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        /// Ignore completion markers.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr0 = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
    }
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_workers()?;
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Generate {
            devices,
            per_device,
            snr_db,
            ..
        } => {
            if let Some(v) = devices {
                cfg.generate.devices = *v;
            }
            if let Some(v) = per_device {
                cfg.generate.transmissions_per_device = *v;
            }
            if snr_db.is_some() {
                cfg.generate.snr_db = *snr_db;
            }
        }
        Command::Preprocess { threshold, min_gap, .. } => {
            if let Some(v) = threshold {
                cfg.preprocess.threshold = *v;
            }
            if let Some(v) = min_gap {
                cfg.preprocess.min_gap = *v;
            }
        }
        Command::Train { arch, train, .. } => {
            if let Some(a) = arch {
                cfg.model.arch = *a;
            }
            train.apply(&mut cfg);
        }
        Command::Eval {
            segments,
            repeats,
            no_sweep,
            ..
        } => {
            if let Some(v) = segments {
                cfg.eval.segments = *v;
            }
            if let Some(v) = repeats {
                cfg.eval.repeats = *v;
            }
            if *no_sweep {
                cfg.eval.sweep = false;
            }
        }
        Command::Estimate { hw: Some(p), .. } => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg.hw = serde_json::from_str::<HwConfig>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        }
        Command::Emulate { format: Some(f), .. } => cfg.fixed_format = f.clone(),
        Command::Pipeline { workdir, train, .. } => {
            if workdir.is_some() {
                cfg.workdir = workdir.clone();
            }
            train.apply(&mut cfg);
        }
        _ => {}
    }
    let cfg = cfg.resolve()?;

    match cli.command {
        Command::Generate { output, .. } => {
            let n = stages::generate(&cfg, &output)?;
            println!("generate: {n} transmissions");
        }
        Command::Preprocess { input, output, .. } => {
            require(&input, "input directory")?;
            let n = stages::preprocess(&cfg, &input, &output)?;
            println!("preprocess: {n} transmissions extracted");
        }
        Command::Train { data, out, .. } => {
            require(&data, "data directory")?;
            let acc = stages::train(&cfg, &data, &out)?;
            println!("train: best dev accuracy {acc:.4}");
        }
        Command::Eval { model, data, out, .. } => {
            require(&model, "checkpoint")?;
            require(&data, "data directory")?;
            let acc = stages::eval(&cfg, &model, &data, &out)?;
            println!("eval: test accuracy {acc:.4}");
        }
        Command::Estimate { model, out, .. } => {
            if let Some(m) = &model {
                require(m, "checkpoint")?;
            }
            let e = stages::estimate_report(&cfg, model.as_deref(), &out)?;
            println!("estimate: {:.3} uJ per data unit", e * 1e6);
        }
        Command::Emulate { model, data, out, .. } => {
            require(&model, "checkpoint")?;
            require(&data, "data directory")?;
            let r = stages::emulate_report(&cfg, &model, &data, &out)?;
            println!(
                "emulate: float {:.4}, {} {:.4}",
                r.float_accuracy, r.format, r.fixed_accuracy
            );
        }
        Command::Pipeline { stages, force, .. } => {
            let workdir = cfg
                .workdir
                .clone()
                .ok_or_else(|| CliError::Config("pipeline needs --workdir or a workdir in the config".into()))?;
            let selected = match stages {
                Some(list) => list.iter().map(|s| s.parse()).collect::<Result<Vec<Stage>, _>>()?,
                None => ALL_STAGES.to_vec(),
            };
            for (stage, outcome) in run_pipeline(&cfg, &workdir, &selected, force)? {
                let word = match outcome {
                    Outcome::Ran => "ran",
                    Outcome::Skipped => "skipped",
                };
                println!("{stage}: {word}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
