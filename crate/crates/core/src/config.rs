//! Run configuration: one file describes a full reproducible experiment
//! (sampler, embedder, losses, optimizer, data source, eval settings).
//!
//! Files are TOML or JSON by extension. Every artifact a run emits embeds the
//! resolved configuration as JSON; feeding that echo back reproduces the run
//! bit for bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedder::{EmbedderConfig, Fusion};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::pooling::{PoolingMethod, DEFAULT_GEM_P};
use crate::sampler::SamplerConfig;
use crate::synth::SyntheticSpec;
use crate::trainer::TrainConfig;

/// Environment variable that overrides every seed in the configuration.
pub const SEED_ENV_VAR: &str = "DGTL_SEED";

fn default_gem_p() -> f64 {
    DEFAULT_GEM_P
}

fn default_bn_epsilon() -> f64 {
    1e-5
}

fn default_log_every() -> usize {
    1
}

fn default_holdout() -> usize {
    2
}

/// `[embedder]` section; `num_identities` is derived from the dataset, and
/// pooling methods are named with a shared `gem_p` exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSection {
    pub input_shape: (usize, usize, usize),
    pub spec_layers: Vec<usize>,
    pub shared_layers: Vec<usize>,
    pub feature_dim: usize,
    pub fusion: String,
    pub pool_fine: String,
    pub pool_coarse: String,
    #[serde(default = "default_gem_p")]
    pub gem_p: f64,
    #[serde(default = "default_bn_epsilon")]
    pub bn_epsilon: f64,
    pub seed: u64,
}

impl EmbedderSection {
    pub fn to_config(&self, num_identities: usize) -> Result<EmbedderConfig> {
        let config = EmbedderConfig {
            input_shape: self.input_shape,
            spec_layers: self.spec_layers.clone(),
            shared_layers: self.shared_layers.clone(),
            feature_dim: self.feature_dim,
            num_identities,
            fusion: Fusion::parse(&self.fusion)?,
            pool_fine: PoolingMethod::parse(&self.pool_fine, self.gem_p)?,
            pool_coarse: PoolingMethod::parse(&self.pool_coarse, self.gem_p)?,
            bn_epsilon: self.bn_epsilon,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

/// `[train]` section: optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

/// `[data]` section: either a directory written by `gen-data` or an inline
/// synthetic spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::config(
                "data section has both a path and a synthetic spec; pick one",
            )),
            (None, None) => Err(Error::config(
                "data section needs either a path or a synthetic spec",
            )),
            _ => Ok(()),
        }
    }
}

/// `[eval]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Samples per `(identity, modality)` group held out for retrieval
    /// evaluation.
    #[serde(default = "default_holdout")]
    pub holdout_per_identity: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            holdout_per_identity: default_holdout(),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub embedder: EmbedderSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// The committed benchmark configuration every shipped threshold was
    /// validated against.
    pub fn benchmark() -> Self {
        RunConfig {
            sampler: SamplerConfig { p: 8, k: 4, seed: 7 },
            embedder: EmbedderSection {
                input_shape: (6, 6, 4),
                spec_layers: vec![8],
                shared_layers: vec![16],
                feature_dim: 16,
                fusion: "sum".into(),
                pool_fine: "avg".into(),
                pool_coarse: "avg".into(),
                gem_p: DEFAULT_GEM_P,
                bn_epsilon: 1e-5,
                seed: 11,
            },
            loss: LossConfig::default(),
            train: TrainSection {
                epochs: 30,
                learning_rate: 3e-3,
                momentum: 0.9,
                weight_decay: 1e-4,
                log_every: 1,
            },
            data: DataSection {
                path: None,
                synthetic: Some(SyntheticSpec::benchmark()),
            },
            eval: EvalSection::default(),
        }
    }

    /// Parse from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::parse(e.to_string()))?;
        config.data.validate()?;
        Ok(config)
    }

    /// Load from a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text)
                .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?,
        };
        config.data.validate()?;
        Ok(config)
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::parse(format!("encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Force every seed (sampler, embedder, synthetic data) to `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.sampler.seed = seed;
        self.embedder.seed = seed;
        if let Some(spec) = self.data.synthetic.as_mut() {
            spec.seed = seed;
        }
    }

    /// Load or generate the dataset this configuration names.
    pub fn resolve_dataset(&self) -> Result<Dataset> {
        self.data.validate()?;
        match (&self.data.path, &self.data.synthetic) {
            (Some(path), None) => Dataset::load(path),
            (None, Some(spec)) => crate::synth::generate(spec),
            _ => unreachable!("validated above"),
        }
    }

    /// Assemble the trainer configuration for a dataset with
    /// `num_identities` classes.
    pub fn to_train_config(
        &self,
        num_identities: usize,
        checkpoint_path: Option<PathBuf>,
    ) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            sampler: self.sampler,
            embedder: self.embedder.to_config(num_identities)?,
            loss: self.loss,
            log_every: self.train.log_every,
            checkpoint_path,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// JSON echo embedded into every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
