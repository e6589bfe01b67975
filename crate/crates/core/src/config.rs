//! TOML run configuration. Every section is optional and falls back to defaults.
//!
//! ```toml
//! [dataset]
//! samples_per_class = 100
//!
//! [train]
//! total_epochs = 60
//! weights = { alpha3 = 0.9, alpha4 = 0.05 }
//!
//! [policy]
//! weight_bits = 4
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ToyDatasetSpec;
use crate::error::{Error, Result};
use crate::quant::QuantPolicy;
use crate::trainer::{Ablation, PretrainConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: ToyDatasetSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub policy: QuantPolicy,
    pub ablation: Ablation,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.policy.validate()?;
        if let Some(n) = self.ablation.classes {
            if n > self.dataset.num_classes {
                return Err(Error::Config(format!(
                    "{n} calibration classes requested but the dataset has {}",
                    self.dataset.num_classes
                )));
            }
        }
        Ok(())
    }
}
