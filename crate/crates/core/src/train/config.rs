use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::optim::OptimConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Where the training data lives and how it is batched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory written by `gen-data`.
    pub dir: PathBuf,
    /// Related pairs per batch (`2B` notes).
    pub batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            checkpoint_every: 100,
        }
    }
}

/// Complete description of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub run: RunSection,
}

impl RunConfig {
    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optim.validate()?;
        if self.data.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Seed of the parameter initialisation.
    pub fn init_seed(&self) -> u64 {
        self.run.seed
    }

    /// Seed of the batch stream, kept apart from the initialisation stream.
    pub fn batch_seed(&self) -> u64 {
        self.run
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(1)
    }
}
