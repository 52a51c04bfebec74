//! Model checkpointing.
//!
//! A checkpoint is a single JSON document: a format-version field, the full
//! embedder configuration echo, every parameter array (running statistics
//! included), and optionally the optimizer state needed to resume training
//! mid-run. Finite `f64` values survive the JSON round trip bit-exactly
//! (shortest round-trip float formatting), so save/load/resume reproduces an
//! uninterrupted run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::{Embedder, EmbedderConfig, ParameterGradients, Parameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Optimizer and loop state for resuming training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: ParameterGradients,
    /// Epoch of the next step to run.
    pub next_epoch: usize,
    /// Batch within that epoch of the next step to run.
    pub next_batch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EmbedderConfig,
    pub params: Parameters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
    /// Echo of the resolved run configuration, when saved by the trainer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(config: EmbedderConfig, params: Parameters) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            params,
            optimizer: None,
            run_config: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.params.all_finite() {
            return Err(Error::numerical(
                "refusing to checkpoint non-finite parameters",
            ));
        }
        let json =
            serde_json::to_string(self).map_err(|e| Error::parse(format!("encode: {e}")))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::parse(format!(
                "unsupported checkpoint format_version {}",
                checkpoint.format_version
            )));
        }
        checkpoint.params.validate_against(&checkpoint.config)?;
        Ok(checkpoint)
    }

    pub fn into_embedder(self) -> Result<Embedder> {
        Embedder::from_parts(self.config, self.params)
    }
}
