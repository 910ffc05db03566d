use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use siid_core::metrics::EvalOptions;
use siid_core::net::NetConfig;
use siid_core::synth::DatasetParams;
use siid_core::train::{LossWeights, TrainSchedule};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// `A = I`, `S = 1`.
    Identity,
    /// `A` = mean image color.
    Constant,
    /// The dataset's own albedo and shading.
    GroundTruth,
}

/// Everything a command needs to run, recorded as `config.json` in its
/// output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Generate {
        out: PathBuf,
        params: DatasetParams,
    },
    Train {
        data: PathBuf,
        out: PathBuf,
        net: NetConfig,
        losses: LossWeights,
        schedule: TrainSchedule,
    },
    Decompose {
        weights: Option<PathBuf>,
        baseline: Option<Baseline>,
        dataset: Option<PathBuf>,
        images: Vec<PathBuf>,
        out: PathBuf,
    },
    Eval {
        dataset: PathBuf,
        pred: PathBuf,
        out: PathBuf,
        options: EvalOptions,
    },
}

impl RunConfig {
    pub fn out(&self) -> &Path {
        match self {
            RunConfig::Generate { out, .. }
            | RunConfig::Train { out, .. }
            | RunConfig::Decompose { out, .. }
            | RunConfig::Eval { out, .. } => out,
        }
    }

    pub fn with_out(mut self, dir: PathBuf) -> Self {
        match &mut self {
            RunConfig::Generate { out, .. }
            | RunConfig::Train { out, .. }
            | RunConfig::Decompose { out, .. }
            | RunConfig::Eval { out, .. } => *out = dir,
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
