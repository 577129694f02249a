//! Job configs. Relative paths inside a config resolve against the config
//! file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use demads_core::features::ClassLabel;
use demads_core::grid::BusId;
use demads_core::load_estimation::EstimatorConfig;
use demads_core::nn::{Loss, OptimizerKind, TrainConfig};
use demads_core::orchestrator::OrchestratorConfig;
use demads_core::rt::RtConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::parse(path, e))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn default_samples() -> usize {
    1500
}

fn default_load_range() -> (f64, f64) {
    (0.0, 4.0)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorJob {
    pub grid: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_load_range")]
    pub load_range_kw: (f64, f64),
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

fn default_pretrain_days() -> u32 {
    14
}

fn default_step() -> u32 {
    300
}

fn default_use_case() -> ClassLabel {
    ClassLabel::Inverted
}

fn default_rt_train() -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::adam(3e-3),
        epochs: 20,
        batch_size: 16,
        loss: Loss::CrossEntropy,
        seed: 0,
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorJob {
    /// Grid files to simulate training windows on.
    pub grids: Vec<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pretrain_days")]
    pub days: u32,
    #[serde(default = "default_step")]
    pub highres_step_s: u32,
    #[serde(default = "default_use_case")]
    pub use_case: ClassLabel,
    #[serde(default)]
    pub rt: RtConfig,
    #[serde(default = "default_rt_train")]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub bus: BusId,
    pub model: PathBuf,
    /// Defaults to the orchestrator's detector threshold.
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorJob {
    pub grid: PathBuf,
    /// Directory written by `simulate`.
    pub measurements: PathBuf,
    pub estimator: PathBuf,
    #[serde(default)]
    pub detectors: Vec<DetectorSpec>,
    #[serde(default)]
    pub orchestrator: OrchestratorConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateJob {
    /// JSON-lines report written by `monitor`.
    pub report: PathBuf,
    /// Measurement directory whose metadata holds the malfunction schedule.
    pub measurements: PathBuf,
}
