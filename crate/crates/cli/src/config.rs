//! The declarative run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use graphode::encoder::Variant;
use graphode::model::ModelConfig;
use graphode::sim::GenConfig;
use graphode::task::Task;
use graphode::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory that relative output paths
/// are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "GRAPHODE_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: Vec<Task>,
    pub ratios: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub chunk: usize,
    pub denormalize: bool,
    pub plot_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tasks: Task::ALL.to_vec(), ratios: vec![0.4, 0.6, 0.8], variants: vec![Variant::Full], seed: 0, chunk: 16, denormalize: false, plot_samples: 2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub precision: Precision,
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Resolves an output path against the output root when it is relative.
pub fn output_path(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}
