//! Pipeline configuration, seed derivation and report provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rfprint::dataset::UNITS_PER_TX;
use rfprint::eval::default_snr_grid;
use rfprint::hwmodel::{FixedFormat, HwConfig};
use rfprint::model::{ModelSpec, NrlConfig, PrnnCnnConfig};
use rfprint::residual::PreprocessParams;
use rfprint::seed;
use rfprint::train::TrainConfig;
use rfprint::waveform::GenConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Arch {
    PrnnCnn,
    NrlCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub prnn_cnn: PrnnCnnConfig,
    pub nrl: NrlConfig,
    /// Also train the NRL baseline and report an accuracy comparison.
    pub baseline: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::PrnnCnn,
            prnn_cnn: PrnnCnnConfig::default(),
            nrl: NrlConfig::default(),
            baseline: false,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, arch: Arch) -> rfprint::Result<ModelSpec> {
        match arch {
            Arch::PrnnCnn => ModelSpec::prnn_cnn(&self.prnn_cnn),
            Arch::NrlCnn => ModelSpec::nrl(&self.nrl),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub segments: usize,
    pub sweep: bool,
    pub snr_db: Vec<f64>,
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            segments: UNITS_PER_TX,
            sweep: true,
            snr_db: default_snr_grid(),
            repeats: 5,
        }
    }
}

/// Every knob of a run. Sub-seeds inside the sections are ignored and
/// replaced by values derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workdir: Option<PathBuf>,
    pub generate: GenConfig,
    pub preprocess: PreprocessParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub hw: HwConfig,
    pub fixed_format: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workdir: None,
            generate: GenConfig::default(),
            preprocess: PreprocessParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            hw: HwConfig::calibrated(),
            fixed_format: FixedFormat::default().to_string(),
        }
    }
}

/// Named children of the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub generate: u64,
    pub split: u64,
    pub train: u64,
    pub sweep: u64,
}

const SEED_NAMESPACE: u64 = 0x5246_5049_5045;

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let child = |tag: u64| seed::derive(master, &[SEED_NAMESPACE, tag]);
        Self {
            generate: child(1),
            split: child(2),
            train: child(3),
            sweep: child(4),
        }
    }

    pub fn as_map(&self) -> BTreeMap<String, u64> {
        [
            ("generate", self.generate),
            ("split", self.split),
            ("train", self.train),
            ("sweep", self.sweep),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    /// Applies the derived seeds and ties the class count to the device
    /// count, then validates every section.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let seeds = self.seeds();
        self.generate.seed = seeds.generate;
        self.train.seed = seeds.train;
        let classes = self.generate.devices as usize;
        self.model.prnn_cnn.classes = classes;
        self.model.nrl.classes = classes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generate.validate()?;
        self.train.validate()?;
        self.hw.validate()?;
        self.format()?;
        self.model.spec(Arch::PrnnCnn)?;
        self.model.spec(Arch::NrlCnn)?;
        if !(1..=UNITS_PER_TX).contains(&self.eval.segments) {
            return Err(CliError::Config(format!(
                "eval.segments must be in 1..=17, got {}",
                self.eval.segments
            )));
        }
        if self.eval.repeats == 0 {
            return Err(CliError::Config("eval.repeats must be at least 1".into()));
        }
        if self.eval.snr_db.iter().any(|s| s.is_nan()) {
            return Err(CliError::Config("eval.snr_db contains NaN".into()));
        }
        Ok(())
    }

    pub fn format(&self) -> Result<FixedFormat, CliError> {
        Ok(self.fixed_format.parse()?)
    }

    /// SHA-256 of the canonical JSON form, with the working directory blanked
    /// so that the hash depends only on what is computed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workdir = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.hash(),
            master_seed: self.seed,
            seeds: self.seeds().as_map(),
        }
    }
}

/// Header block carried by every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
}

impl Provenance {
    /// One-line comment for CSV and PGM headers.
    pub fn comment(&self) -> String {
        format!("# provenance: {}\n", serde_json::to_string(self).expect("provenance serialises"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_follow_the_master_seed() {
        let a = PipelineConfig::default().resolve().unwrap();
        let b = PipelineConfig {
            seed: 2,
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_ne!(a.provenance(), b.provenance());
        assert_ne!(a.generate.seed, b.generate.seed);
        assert_eq!(a.generate.seed, a.seeds().generate);
        let p: Provenance = serde_json::from_str(a.provenance().comment().trim_start_matches("# provenance: ")).unwrap();
        assert_eq!(p, a.provenance());
    }

    #[test]
    fn hash_ignores_the_working_directory() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            workdir: Some("/elsewhere".into()),
            ..Default::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig {
            fixed_format: "q8.8".into(),
            ..Default::default()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn invalid_sections_are_config_errors() {
        for bad in [
            PipelineConfig {
                fixed_format: "q0.0".into(),
                ..Default::default()
            },
            PipelineConfig {
                eval: EvalConfig {
                    segments: 0,
                    ..Default::default()
                },
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.resolve(), Err(CliError::Config(_))));
        }
        let unknown = serde_json::from_str::<PipelineConfig>(r#"{"sed": 3}"#);
        assert!(unknown.is_err());
    }
}
