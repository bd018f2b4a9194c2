//! Run configuration: one TOML file with a section per component.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semalign::data::SyntheticSpec;
use semalign::losses::ObjectiveConfig;
use semalign::model::ModelConfig;
use semalign::sampling::SweepConfig;
use semalign::trainer::{AdamConfig, TrainConfig};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "SEMALIGN_OUT";

/// Name of the resolved config written into every run directory.
pub const ECHO_FILE: &str = "config.toml";

/// Training-loop settings (the `[train]` section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub augment_strength: f64,
    pub use_unpaired: bool,
    pub ks: Vec<usize>,
    pub optimizer: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            eval_every: t.eval_every,
            augment_strength: t.augment_strength,
            use_unpaired: t.use_unpaired,
            ks: t.ks,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and batch sampling. The dataset and the
    /// sweep carry their own seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train: TrainSection,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub data: SyntheticSpec,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            train: TrainSection::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            data: SyntheticSpec::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given. The
    /// output directory is then overridden from the environment if set.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.out_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.data.validate()?;
        self.sweep.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            optimizer: self.train.optimizer,
            eval_every: self.train.eval_every,
            seed: self.seed,
            augment_strength: self.train.augment_strength,
            use_unpaired: self.train.use_unpaired,
            ks: self.train.ks.clone(),
            model: self.model.clone(),
            objective: self.objective.clone(),
        }
    }

    /// Copies the settings a mode preset controls back from `t`.
    pub fn absorb(&mut self, t: &TrainConfig) {
        self.train.use_unpaired = t.use_unpaired;
        self.objective = t.objective.clone();
    }

    /// The resolved config as TOML, defaults included.
    pub fn echo(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the echo with the output directory blanked, so relocating
    /// a run does not change its identity.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.echo()?.as_bytes())))
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.echo()?)?;
        Ok(path)
    }
}
