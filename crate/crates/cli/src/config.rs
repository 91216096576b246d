use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use segkit::data::{AugmentOp, AugmentSpec, SplitRatios};
use segkit::model::{BlockSpec, ModelConfig};
use segkit::train::TrainConfig;

/// Every knob of a run as one flat JSON object. Missing keys take the
/// defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory holding `images/` and `masks/`.
    pub dataset_root: PathBuf,
    /// Split manifest; `<out_dir>/split.tsv` when unset.
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    pub input_side: usize,
    pub in_channels: usize,
    pub width_multiplier: f64,
    pub encoder_plan: Vec<BlockSpec>,
    pub decoder_channels: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub threshold: f64,
    pub dice_smooth: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    /// Drives the split shuffle, weight init, and minibatch order.
    pub seed: u64,

    pub augment_ops: Vec<AugmentOp>,
    /// Falls back to `seed`.
    pub augment_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let ratios = SplitRatios::default();
        Self {
            dataset_root: PathBuf::from("data"),
            manifest: None,
            out_dir: PathBuf::from("runs"),
            train_ratio: ratios.train,
            val_ratio: ratios.val,
            test_ratio: ratios.test,
            input_side: model.input_side,
            in_channels: model.in_channels,
            width_multiplier: model.width_multiplier,
            encoder_plan: model.encoder_plan,
            decoder_channels: model.decoder_channels,
            bn_eps: model.bn_eps,
            bn_momentum: model.bn_momentum,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            early_stop_patience: train.early_stop_patience,
            threshold: train.threshold,
            dice_smooth: train.dice_smooth,
            adadelta_rho: train.adadelta_rho,
            adadelta_eps: train.adadelta_eps,
            seed: train.seed,
            augment_ops: AugmentSpec::default().ops,
            augment_seed: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.out_dir.join("split.tsv"))
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_side: self.input_side,
            in_channels: self.in_channels,
            width_multiplier: self.width_multiplier,
            encoder_plan: self.encoder_plan.clone(),
            decoder_channels: self.decoder_channels.clone(),
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            threshold: self.threshold,
            dice_smooth: self.dice_smooth,
            adadelta_rho: self.adadelta_rho,
            adadelta_eps: self.adadelta_eps,
            seed: self.seed,
        }
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            ops: self.augment_ops.clone(),
            seed: self.augment_seed.unwrap_or(self.seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ratios().validate()?;
        let model = self.model_config();
        model.validate()?;
        self.train_config().validate()?;
        self.augment_spec().validate(model.input_side)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_a_fixed_point() {
        let mut cfg = RunConfig::default();
        cfg.manifest = Some("m.tsv".into());
        cfg.augment_seed = Some(9);
        cfg.augment_ops.push(AugmentOp::CenterCrop { side: 256 });
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"input_side": 64, "width_multiplier": 0.25}"#).unwrap();
        assert_eq!(cfg.input_side, 64);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.max_epochs, 100);
        assert_eq!(cfg.augment_spec().seed, 0);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"learning_rat": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }
}
