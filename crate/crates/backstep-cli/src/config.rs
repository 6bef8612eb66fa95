//! Layered configuration: a TOML file with `[section] key = value` entries
//! provides defaults, command-line flags override individual keys, and
//! anything still unset falls back to built-in values. The fully resolved
//! configuration is echoed into the run's manifest.

use std::path::{Path, PathBuf};

use backstep::{Error, Result};
use serde::{Deserialize, Serialize};

/// Raw file contents; every leaf optional so partial files are fine.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub dx: Option<f64>,
    pub dt: Option<f64>,
    pub sigma: Option<f64>,
    pub u0: Option<f64>,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: Option<String>,
    pub gamma: Option<f64>,
    pub c: Option<f64>,
    pub gamma0: Option<f64>,
    pub beta_hat0: Option<f64>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: Option<f64>,
    pub sample_every: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub runs: Option<usize>,
    pub sigma_low: Option<f64>,
    pub sigma_high: Option<f64>,
    pub horizon: Option<f64>,
    pub subsample: Option<f64>,
    pub gamma: Option<f64>,
    pub c: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub model_seed: Option<u64>,
    pub holdout_every: Option<usize>,
    pub target_test_rel_l2: Option<f64>,
    pub check_every: Option<usize>,
    pub log_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub dx: Option<Vec<f64>>,
    pub repeats: Option<usize>,
    pub gate: Option<f64>,
    pub inputs: Option<usize>,
}

/// Parses the file if a path was given; an unreadable or malformed file is a
/// configuration error naming the problem.
pub fn load_file(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
        field: "config",
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig {
        field: "config",
        message: format!("{}: {e}", path.display()),
    })
}

/// First set value wins: flag, then file, then default.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Controller selection, resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    OpenLoop,
    ExactLyapunov,
    NoLyapunov,
    ExactPassive,
    NoPassive,
}

impl ControllerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "open-loop" => Ok(Self::OpenLoop),
            "exact-lyapunov" => Ok(Self::ExactLyapunov),
            "no-lyapunov" => Ok(Self::NoLyapunov),
            "exact-passive" => Ok(Self::ExactPassive),
            "no-passive" => Ok(Self::NoPassive),
            other => Err(Error::InvalidConfig {
                field: "controller.kind",
                message: format!(
                    "unknown controller kind {other:?}; expected open-loop, \
                     exact-lyapunov, no-lyapunov, exact-passive or no-passive"
                ),
            }),
        }
    }

    /// Whether this kind produces gains through a learned operator.
    pub fn needs_model(self) -> bool {
        matches!(self, Self::NoLyapunov | Self::NoPassive)
    }
}

/// Fully resolved simulation settings, echoed verbatim into the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSimulate {
    pub dx: f64,
    pub dt: f64,
    pub sigma: f64,
    pub u0: f64,
    pub bound: f64,
    pub controller: ControllerKind,
    pub gamma: f64,
    pub c: f64,
    pub gamma0: f64,
    pub beta_hat0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub horizon: f64,
    pub sample_every: f64,
}

/// Fully resolved dataset-generation settings.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedDataset {
    pub runs: usize,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub horizon: f64,
    pub subsample: f64,
    pub dx: f64,
    pub dt: f64,
    pub gamma: f64,
    pub c: f64,
    pub bound: f64,
    pub beta_hat0: f64,
    pub u0: f64,
    pub seed: u64,
}

/// Fully resolved training settings.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub dataset: PathBuf,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub model_seed: u64,
    pub holdout_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_test_rel_l2: Option<f64>,
    pub check_every: usize,
    pub log_every: usize,
}

/// Fully resolved benchmark settings.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedBench {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub dx: Vec<f64>,
    pub repeats: usize,
    pub gate: f64,
    pub inputs: usize,
}
