//! JSON run configuration for `train`.
//!
//! Every key is optional and defaults to the library default; unknown keys are rejected. Omitted
//! `model.patch_size` and `model.bottleneck_channels` follow from `image_size`.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "precision": "f32",
//!   "validation_fraction": 0.1,
//!   "data": "patches/",
//!   "out_dir": "runs/a",
//!   "model": { "image_size": 128, "base_channels_g": 128, "base_channels_d": 64, ... },
//!   "train": {
//!     "schedule": { "epochs_g_l2_only": 2, "epochs_d_only": 4, "total_epochs": 90,
//!                   "freeze_g_every": 0, "freeze_d_every": 0, "batch_size": 64 },
//!     "adam": { "learning_rate": 0.0002, "beta1": 0.5, "beta2": 0.999, "epsilon": 1e-8,
//!               "linear_decay": false },
//!     "loss": { "lambda_l2": 0.998, "lambda_adv": 0.002 },
//!     "l2_reduction": "mean",
//!     "blank_fill": 0.0
//!   }
//! }
//! ```

use std::path::{Path, PathBuf};

use cxinpaint_core::models::ModelConfig;
use cxinpaint_core::optim::TrainConfig;
use cxinpaint_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Share of patient groups held out for per-epoch validation.
    pub validation_fraction: f64,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            validation_fraction: 0.1,
            data: None,
            out_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config. `model.patch_size` and `model.bottleneck_channels`, when
    /// omitted, follow from `image_size` and `base_channels_g`.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg: Self = serde_json::from_value(raw.clone()).map_err(|e| Error::Config(e.to_string()))?;
        if raw.pointer("/model/patch_size").is_none() {
            cfg.model.patch_size = cfg.model.image_size / 2;
        }
        if raw.pointer("/model/bottleneck_channels").is_none() && cfg.model.image_size.is_power_of_two() {
            cfg.model.bottleneck_channels = cfg.model.expected_bottleneck();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(
                Error::Config(format!("validation_fraction {} must lie in (0, 1)", self.validation_fraction)).into()
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sead": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"schedule": {"epochs": 3}}}"#).is_err());
    }

    #[test]
    fn nested_overrides() {
        let cfg = RunConfig::from_json(
            r#"{"precision": "f64", "model": {"image_size": 32, "patch_size": 16, "base_channels_g": 16,
                "bottleneck_channels": 128}, "train": {"schedule": {"freeze_g_every": 2}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.model.image_size, 32);
        assert_eq!(cfg.train.schedule.freeze_g_every, 2);
        assert_eq!(cfg.train.schedule.epochs_d_only, 4);
    }

    #[test]
    fn omitted_sizes_follow_image_size() {
        let cfg = RunConfig::from_json(r#"{"model": {"image_size": 32, "base_channels_g": 16}}"#).unwrap();
        assert_eq!(cfg.model, cxinpaint_core::models::ModelConfig::with_sizes(32, 16, 64));
    }

    #[test]
    fn inconsistent_model_is_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"image_size": 32, "patch_size": 64}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"image_size": 32, "bottleneck_channels": 7}}"#).is_err());
    }
}
