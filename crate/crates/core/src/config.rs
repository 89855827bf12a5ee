//! Top-level configuration: one JSON file, environment overrides, defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{EndpointConfig, ANALYZER_KEY_ENV, ANALYZER_URL_ENV, GENERATOR_KEY_ENV, GENERATOR_URL_ENV};
use crate::pipeline::PipelineConfig;
use crate::reward::RewardWeights;
use crate::store::RatioTarget;
use crate::verification::DEFAULT_REQUIRED_ANNOTATORS;

pub const CONFIG_ENV: &str = "FORGE_CONFIG";
pub const DATASET_ENV: &str = "FORGE_DATASET";
pub const LEDGER_ENV: &str = "FORGE_LEDGER";
pub const IMAGES_ENV: &str = "FORGE_IMAGES";
pub const TEMPLATES_ENV: &str = "FORGE_TEMPLATES_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha_outcome: f64,
    pub alpha_format: f64,
    pub alpha_stepwise: f64,
    pub epsilon: f64,
    pub rollout_size: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        let w = RewardWeights::default();
        Self {
            alpha_outcome: w.alpha_outcome,
            alpha_format: w.alpha_format,
            alpha_stepwise: w.alpha_stepwise,
            epsilon: w.epsilon,
            rollout_size: 8,
        }
    }
}

impl RewardConfig {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            alpha_outcome: self.alpha_outcome,
            alpha_format: self.alpha_format,
            alpha_stepwise: self.alpha_stepwise,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub dataset: Option<PathBuf>,
    /// Defaults to the dataset's sidecar `.ledger.jsonl`.
    pub ledger: Option<PathBuf>,
    pub images: Option<PathBuf>,
    /// JSON taxonomy file; the built-in 21-category list when absent.
    pub taxonomy: Option<PathBuf>,
    pub ratio_target: RatioTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub required_annotators: usize,
    /// Accept verdicts on trajectories that are already Rejected.
    pub allow_overwrite: bool,
    pub tokens_file: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    pub image_read_timeout_ms: u64,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            required_annotators: DEFAULT_REQUIRED_ANNOTATORS,
            allow_overwrite: false,
            tokens_file: None,
            ui_dir: None,
            image_read_timeout_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    pub pipeline: PipelineConfig,
    pub rewards: RewardConfig,
    pub analyzer: EndpointConfig,
    pub generator: EndpointConfig,
    pub templates_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub review: ReviewConfig,
}

impl ForgeConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_json(&text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })
    }

    /// Loads `path` if given, else defaults, then applies the process
    /// environment and validates.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let set_path = |slot: &mut Option<PathBuf>, var: &str| {
            if let Some(v) = lookup(var) {
                *slot = Some(PathBuf::from(v));
            }
        };
        set_path(&mut self.dataset.dataset, DATASET_ENV);
        set_path(&mut self.dataset.ledger, LEDGER_ENV);
        set_path(&mut self.dataset.images, IMAGES_ENV);
        set_path(&mut self.templates_dir, TEMPLATES_ENV);
        for (endpoint, url_var, key_var) in [
            (&mut self.analyzer, ANALYZER_URL_ENV, ANALYZER_KEY_ENV),
            (&mut self.generator, GENERATOR_URL_ENV, GENERATOR_KEY_ENV),
        ] {
            if let Some(url) = lookup(url_var) {
                endpoint.base_url = url;
            }
            if let Some(key) = lookup(key_var) {
                endpoint.api_key = Some(key);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.rewards.weights().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.rewards.rollout_size == 0 {
            return Err(ConfigError::Invalid("rewards.rollout_size must be >= 1".into()));
        }
        if self.review.required_annotators == 0 {
            return Err(ConfigError::Invalid("review.required_annotators must be >= 1".into()));
        }
        let t = &self.dataset.ratio_target;
        if [t.direct, t.reflection, t.multi_step].iter().any(|w| !w.is_finite() || *w < 0.0)
            || t.direct + t.reflection + t.multi_step <= 0.0
        {
            return Err(ConfigError::Invalid("dataset.ratio_target weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }
}
