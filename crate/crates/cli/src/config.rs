use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use mogan_core::data::DatasetConfig;
use mogan_core::metrics::{MetricsConfig, EVAL_SEEDS};
use mogan_core::trainer::{RunDir, TrainConfig};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub metrics: MetricsConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: EVAL_SEEDS.to_vec(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// The single TOML file behind every command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parse `path`, or fall back to defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.data.validate()?;
        self.train.validate()?;
        self.eval.metrics.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Failure::Config("config error in `eval.seeds`: need at least one seed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifacts {
    pub config: PathBuf,
    pub teacher: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub samples: PathBuf,
}

/// Written once when a run starts and never modified afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub code_version: String,
    pub created_at: DateTime<Utc>,
    pub data_dir: PathBuf,
    pub config: RunConfig,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn new(name: &str, data_dir: &Path, config: &RunConfig, run: &RunDir) -> Self {
        Self {
            name: name.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            created_at: Utc::now(),
            data_dir: data_dir.to_path_buf(),
            config: config.clone(),
            artifacts: Artifacts {
                config: run.config_path(),
                teacher: run.teacher_path(),
                metrics: run.metrics_path(),
                checkpoints: run.checkpoints_dir(),
                samples: run.samples_dir(),
            },
        }
    }

    /// Write the manifest and the config snapshot; refuses to overwrite either.
    pub fn write(&self, run: &RunDir) -> Result<(), Failure> {
        let manifest = run.manifest_path();
        if manifest.exists() {
            return Err(Failure::Runtime(format!(
                "run manifest {} already exists",
                manifest.display()
            )));
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(&manifest, json).map_err(|e| io_failure(&manifest, e))?;
        let toml = toml::to_string(&self.config).map_err(|e| Failure::Runtime(e.to_string()))?;
        let cfg = run.config_path();
        std::fs::write(&cfg, toml).map_err(|e| io_failure(&cfg, e))
    }
}

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Root for run directories, `$MOGAN_RUNS_DIR` or `runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("MOGAN_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn sections_are_optional() {
        let cfg: RunConfig = toml::from_str("[train]\nsteps = 3\nwarmup_steps = 1\n").unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.data, DatasetConfig::default());
    }
}
