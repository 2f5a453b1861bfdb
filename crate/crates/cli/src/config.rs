//! Run configuration: profile defaults, then a JSON file, then flags.

use std::fs;
use std::path::Path;

use clap::{Args, ValueEnum};
use dmrn::classifier::SvmConfig;
use dmrn::data::Dataset;
use dmrn::pairing::PairMode;
use dmrn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 200 epochs, stage widths 16/32/64/128, two blocks per stage.
    #[default]
    Paper,
    /// 20 epochs, stage widths 8/16/32/64, one block per stage.
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives parameter initialisation, pair sampling and fold assignment.
    pub seed: u64,
    pub folds: usize,
    pub train: TrainConfig,
    pub svm: SvmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            folds: 5,
            train: TrainConfig::default(),
            svm: SvmConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        RunConfig {
            train: match profile {
                Profile::Paper => TrainConfig::default(),
                Profile::Small => TrainConfig::small(),
            },
            ..RunConfig::default()
        }
    }
}

/// Flags shared by every command that trains.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON file with (part of) a run configuration.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Base values that the file and flags override.
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pairs per mini-batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Gradient norm bound; 0 turns clipping off.
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Stages entering the loss, e.g. `1,2,3,4` or `4`.
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub pair_mode: Option<PairModeArg>,
    /// Channel widths of the four stages, e.g. `16,32,64,128`.
    #[arg(long, value_delimiter = ',')]
    pub stage_channels: Option<Vec<usize>>,
    #[arg(long)]
    pub blocks_per_stage: Option<usize>,
    #[arg(long)]
    pub svm_c: Option<f64>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PairModeArg {
    Uniform,
    ClassBalanced,
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::usage(msg.into())
}

impl ConfigArgs {
    /// Builds the configuration for `dataset`. Input size and channel count
    /// always follow the data.
    pub fn resolve(&self, dataset: &Dataset) -> Result<RunConfig, Failure> {
        let mut value = serde_json::to_value(RunConfig::for_profile(self.profile)).expect("serialisable");
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            merge(&mut value, patch);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| usage(format!("invalid configuration: {e}")))?;

        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            cfg.train.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.train.weight_decay = v;
        }
        if let Some(v) = self.max_grad_norm {
            cfg.train.max_grad_norm = (v != 0.0).then_some(v);
        }
        if let Some(v) = self.margin {
            cfg.train.loss.margin = v;
        }
        if let Some(v) = &self.stages {
            cfg.train.loss.stages = v.clone();
        }
        if let Some(v) = self.pair_mode {
            cfg.train.sampler.mode = match v {
                PairModeArg::Uniform => PairMode::Uniform,
                PairModeArg::ClassBalanced => PairMode::ClassBalanced,
            };
        }
        if let Some(v) = &self.stage_channels {
            cfg.train.model.stage_channels = v
                .as_slice()
                .try_into()
                .map_err(|_| usage(format!("--stage-channels needs 4 values, got {}", v.len())))?;
        }
        if let Some(v) = self.blocks_per_stage {
            cfg.train.model.blocks_per_stage = v;
        }
        if let Some(v) = self.svm_c {
            cfg.svm.c = v;
        }
        if let Some(v) = self.k {
            cfg.folds = v;
        }

        cfg.train.seed = cfg.seed;
        cfg.train.sampler.seed = cfg.seed;
        let [channels, size, _] = dataset.image_shape;
        cfg.train.model.in_channels = channels;
        cfg.train.model.input_size = size;
        cfg.train.validate().map_err(|e| usage(e.to_string()))?;
        cfg.svm.validate().map_err(|e| usage(e.to_string()))?;
        if cfg.folds < 2 {
            return Err(usage(format!("k must be at least 2, got {}", cfg.folds)));
        }
        Ok(cfg)
    }
}

/// What a run directory records about how it was produced.
#[derive(Debug, Serialize)]
pub struct ResolvedRun<'a> {
    pub command: &'a str,
    pub data: String,
    /// SHA-256 over the dataset files, in path order.
    pub data_sha256: String,
    pub config: &'a RunConfig,
}

pub fn write_resolved(dir: &Path, run: &ResolvedRun<'_>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(run).expect("serialisable");
    crate::output::write(&dir.join("config.json"), text.as_bytes())
}
