//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use rtrl_core::engines::EngineSpec;
use rtrl_core::optim::OptimizerSpec;
use rtrl_core::tasks::TaskSpec;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "RTRL_OUTPUT_ROOT";
pub const DEFAULT_SEEDS: [u64; 5] = [42, 123, 7, 2024, 31337];

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_spectral_every() -> usize {
    50
}

fn default_window() -> usize {
    rtrl_core::metrics::DEFAULT_WINDOW
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Rnn,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub kind: ModelKind,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    /// Run a full-RTRL engine in lockstep on the same weights and log the
    /// cosine between its gradient and the method's gradient.
    #[serde(default)]
    pub cosine_reference: bool,
    /// Spectral snapshot cadence in steps (0 disables); shift steps are
    /// always included when enabled.
    #[serde(default = "default_spectral_every")]
    pub spectral_every: usize,
    #[serde(default)]
    pub jacobian_dumps: bool,
    #[serde(default = "default_window")]
    pub window: usize,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            cosine_reference: false,
            spectral_every: default_spectral_every(),
            jacobian_dumps: false,
            window: default_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub engines: Vec<EngineSpec>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative CSV paths are resolved against the config's directory.
        if let TaskSpec::Csv { path: csv_path, .. } = &mut cfg.task {
            if csv_path.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv_path = dir.join(&*csv_path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("invalid run name {:?}", self.name));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.engines.is_empty() {
            return bad("at least one engine is required".into());
        }
        if self.model.hidden == 0 {
            return bad("model.hidden must be positive".into());
        }
        if self.diagnostics.window == 0 {
            return bad("diagnostics.window must be positive".into());
        }
        let n = self.model.hidden;
        let mut labels = Vec::new();
        for e in &self.engines {
            e.validate(n).map_err(|err| HarnessError::Config(err.to_string()))?;
            if self.model.kind == ModelKind::Lstm
                && !matches!(e, EngineSpec::FullRtrl | EngineSpec::SparseRtrl { .. } | EngineSpec::Traces)
            {
                return bad(format!("engine {} is not available for the LSTM", e.label()));
            }
            let label = e.label();
            if labels.contains(&label) {
                return bad(format!("duplicate engine {label}"));
            }
            labels.push(label);
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("learning rate {lr} must be positive"));
        }
        Ok(())
    }

    /// Output directory: explicit `output_dir`, else `$RTRL_OUTPUT_ROOT/<name>`,
    /// else `runs/<name>`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(&self.name)
    }
}
