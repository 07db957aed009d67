//! TOML run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Experiment, HarnessError};
use crate::pipeline::MetaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub target: String,
    pub deltas: Vec<f64>,
    /// Second-mass ranges for the range-shift sweep.
    pub shifts: Vec<(f64, f64)>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            target: "OOD-1".into(),
            deltas: vec![0.05, 0.1, 0.2],
            shifts: vec![(1.0, 2.0), (1.3, 2.3)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub meta: MetaConfig,
    pub experiment: Experiment,
    pub sweep: SweepConfig,
    pub checkpoint_dir: PathBuf,
    /// Oracle values are cached here; unset disables the disk cache.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            meta: MetaConfig::default(),
            experiment: Experiment::default(),
            sweep: SweepConfig::default(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            cache_dir: Some(PathBuf::from("results/cache")),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.meta
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.checkpoint_dir.join(format!("seed{seed}.ckpt"))
    }

    pub fn stepsize_checkpoint_path(&self, delta: f64, seed: u64) -> PathBuf {
        self.checkpoint_dir
            .join(format!("delta{delta:.2}-seed{seed}.ckpt"))
    }

    pub fn shift_checkpoint_path(&self, m2: (f64, f64), seed: u64) -> PathBuf {
        self.checkpoint_dir
            .join(format!("m2-{:.2}-{:.2}-seed{seed}.ckpt", m2.0, m2.1))
    }
}
