//! Run configuration: one TOML file, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cae::CaeConfig;
use crate::dataset::DataConfig;
use crate::error::{Result, VadError};
use crate::evaluation::{Aggregation, FrameOptions, MaskPolicy};
use crate::objectives::ScoreWeights;
use crate::optim::TrainConfig;
use crate::vit::VitConfig;

pub const SNAPSHOT_NAME: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mask_draws: usize,
    pub aggregation: Aggregation,
    /// Per-video min-max normalization before pooling.
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let f = FrameOptions::default();
        Self { mask_draws: 1, aggregation: f.aggregation, normalize: f.normalize }
    }
}

impl EvalConfig {
    pub fn frames(&self) -> FrameOptions {
        FrameOptions { aggregation: self.aggregation, normalize: self.normalize }
    }

    pub fn policy(&self) -> MaskPolicy {
        MaskPolicy { draws: self.mask_draws }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Motion branch on or off.
    pub motion: bool,
    pub weights: ScoreWeights,
    pub data: DataConfig,
    pub appearance: VitConfig,
    pub motion_model: CaeConfig,
    pub train: TrainConfig,
    pub motion_train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            motion: true,
            weights: ScoreWeights::default(),
            data: DataConfig::default(),
            appearance: VitConfig::default(),
            motion_model: CaeConfig::default(),
            train: TrainConfig::default(),
            motion_train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| VadError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VadError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| VadError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| VadError::Config(e.to_string()))
    }

    /// Sets the run seed and propagates it to both training loops.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.motion_train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.appearance.validate()?;
        self.motion_model.validate()?;
        self.train.validate()?;
        self.motion_train.validate()?;
        self.weights.validate()?;
        if self.eval.mask_draws == 0 {
            return Err(VadError::Config("eval.mask_draws must be at least 1".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(VadError::Config("ablation.seeds is empty".into()));
        }
        Ok(())
    }

    /// Writes the resolved config into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| VadError::io(dir, e))?;
        let path = dir.join(SNAPSHOT_NAME);
        fs::write(&path, self.to_toml()?).map_err(|e| VadError::io(&path, e))
    }
}
