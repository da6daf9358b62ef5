//! Run configuration: one TOML file with a section per component.
//!
//! ```toml
//! seed = 7
//! split_ratio = [7, 1, 2]
//!
//! [model]
//! scale_preset = "desk"
//! image_height = 32
//! image_width = 32
//! base_channels = 8
//! blocks_per_module = 2
//! num_categories = 4
//!
//! [train]
//! batch_size = 16
//! budgets = { detection = 30, classification = 30, joint = 40 }
//!
//! [paths]
//! dataset = "data"
//! ```
//!
//! Every section is optional and falls back to the desk defaults. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::infer::InferConfig;
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    /// Train/val/test proportions used by `synth`.
    pub split_ratio: [usize; 3],
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split_ratio: [7, 1, 2],
            model: ModelConfig::desk(),
            objective: ObjectiveConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate(self.model.class_channels())?;
        self.synth.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if self.split_ratio.iter().sum::<usize>() == 0 {
            return Err(Error::Config("split_ratio must not be all zero".into()));
        }
        if self.synth.num_categories() != self.model.num_categories {
            return Err(Error::Config(format!(
                "synth has {} categories, model expects {}",
                self.synth.num_categories(),
                self.model.num_categories
            )));
        }
        Ok(())
    }
}
