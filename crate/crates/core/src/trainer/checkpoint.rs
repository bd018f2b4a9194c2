use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TwoStreamModel;
use crate::numerics::RngState;
use crate::trainer::{Adam, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run. Layer specs, temperature
/// and kernel weight logits travel inside the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub epoch: usize,
    pub step: u64,
    /// Hash of the run configuration that produced this state.
    pub config_hash: String,
    pub model: TwoStreamModel,
    pub optimizer: Adam,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            epoch: state.epoch,
            step: state.step,
            config_hash: config_hash.into(),
            model: state.model.clone(),
            optimizer: state.optimizer.clone(),
            rng: state.rng.state(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_slice(&bytes)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: header.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_slice(&bytes)?)
    }
}
