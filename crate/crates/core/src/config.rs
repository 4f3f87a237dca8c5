//! Run configuration file (TOML). Every section is optional and falls back to
//! the defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptationConfig, SourceConfig};
use crate::data::{AugmentConfig, DataConfig};
use crate::error::Result;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden: m.hidden,
            bottleneck: m.bottleneck,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in a run.
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ArchitectureConfig,
    pub source: SourceConfig,
    pub adapt: AdaptationConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            hidden: self.model.hidden.clone(),
            bottleneck: self.model.bottleneck,
            classes: self.data.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.augment.validate()?;
        self.model_config().validate()?;
        self.source.validate()?;
        self.adapt.validate()
    }

    /// Copy with every implicit value made explicit.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        out.adapt.bank_capacity.get_or_insert(self.data.n_target);
        out
    }
}
