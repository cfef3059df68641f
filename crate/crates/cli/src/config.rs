//! TOML run configuration. Unknown keys are rejected at every level.
//!
//! Relative paths inside the file resolve against the run root: the
//! `PORTRAIT_RUN_ROOT` environment variable if set, else `paths.run_root`
//! (itself relative to the config file), else the config file's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use portrait_core::avatar::DatasetConfig;
use portrait_model::model::{Ablation, ModelConfig};
use portrait_model::pipeline::{default_schedule, StageConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const RUN_ROOT_ENV: &str = "PORTRAIT_RUN_ROOT";

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub run_root: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub scale: f64,
    pub ablation: Ablation,
    /// Explicit stages replace the default curriculum.
    pub stages: Option<Vec<StageConfig>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            scale: 0.05,
            ablation: Ablation::None,
            stages: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    pub data: Option<DatasetConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string().replace('\n', " ")))
    }

    /// Reads, validates and resolves every path to an absolute one.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        let dir = absolute(path.parent().unwrap_or(Path::new(".")))?;
        let env_root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from);
        cfg.resolve(&dir, env_root.as_deref())?;
        cfg.stages()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, config_dir: &Path, env_root: Option<&Path>) -> Result<(), ConfigError> {
        let root = match (env_root, &self.paths.run_root) {
            (Some(r), _) => absolute(r)?,
            (None, Some(r)) => join(config_dir, r),
            (None, None) => config_dir.to_path_buf(),
        };
        self.paths.run_root = Some(root.clone());
        for p in [&mut self.paths.data, &mut self.paths.out].into_iter().flatten() {
            *p = join(&root, p);
        }
        Ok(())
    }

    pub fn stages(&self) -> Result<Vec<StageConfig>, ConfigError> {
        let stages = match &self.schedule.stages {
            Some(s) => s.clone(),
            None => default_schedule(self.schedule.scale).map_err(|e| ConfigError(e.to_string()))?,
        };
        if stages.is_empty() {
            return Err(ConfigError("schedule has no stages".into()));
        }
        for s in &stages {
            s.validate().map_err(|e| ConfigError(e.to_string()))?;
        }
        Ok(stages)
    }
}

fn join(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn absolute(p: &Path) -> Result<PathBuf, ConfigError> {
    std::path::absolute(p).map_err(|e| ConfigError(format!("cannot resolve {}: {e}", p.display())))
}
