//! Flat run configuration: every tunable of a pipeline run in one table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attr_text::NUM_ATTRIBUTES;
use crate::data::{AugmentConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::trainer::{FitMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub mode: FitMode,
    /// Held-out fraction for inductive runs.
    pub holdout: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub eval_every: usize,
    pub grad_clip: f64,

    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_st: f64,
    pub alpha: f64,
    pub delta: f64,
    pub tau: f64,

    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,

    pub use_attribute_text: bool,
    pub use_aica: bool,
    pub head_side: bool,
    pub head_count: bool,
    pub head_left: bool,
    pub head_right: bool,

    pub base_width: usize,
    pub depth: usize,
    pub norm_groups: usize,
    pub text_dim: usize,
    pub text_len: usize,
    pub head_hidden: usize,

    pub max_blobs: usize,
    pub blob_scale_min: f64,
    pub blob_scale_max: f64,
    pub noise_std: f64,
    pub saliency_cell: usize,
    pub saliency_noise: f64,
    pub saliency_noise_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        let s = SynthConfig::default();
        RunConfig {
            seed: 0,
            height: m.height,
            width: m.width,
            mode: FitMode::Inductive,
            holdout: 0.2,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            eval_every: t.eval_every,
            grad_clip: t.grad_clip,
            lambda_c: t.weights.lambda_c,
            lambda_a: t.weights.lambda_a,
            lambda_st: t.weights.lambda_st,
            alpha: t.weights.alpha,
            delta: t.weights.delta,
            tau: t.weights.tau,
            max_rotation_deg: t.augment.max_rotation_deg,
            hflip_prob: t.augment.hflip_prob,
            vflip_prob: t.augment.vflip_prob,
            use_attribute_text: t.use_attribute_text,
            use_aica: m.use_aica,
            head_side: true,
            head_count: true,
            head_left: true,
            head_right: true,
            base_width: m.base_width,
            depth: m.depth,
            norm_groups: m.norm_groups,
            text_dim: m.text_dim,
            text_len: m.text_len,
            head_hidden: m.head_hidden,
            max_blobs: s.max_blobs,
            blob_scale_min: s.blob_scale_min,
            blob_scale_max: s.blob_scale_max,
            noise_std: s.noise_std,
            saliency_cell: s.saliency_cell,
            saliency_noise: s.saliency_noise,
            saliency_noise_grid: s.saliency_noise_grid,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Overrides one key from its textual value, with the same parsing and
    /// type checks as the config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string()).expect("round trip");
        let Some(old) = table.get(key) else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        };
        let parsed = match old {
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            toml::Value::Float(_) => {
                toml::Value::Float(value.parse::<f64>().map_err(|_| {
                    Error::Config(format!("{key}: expected a number, got {value:?}"))
                })?)
            }
            _ => {
                let doc: toml::Table = toml::from_str(&format!("v = {value}"))
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))?;
                doc["v"].clone()
            }
        };
        table.insert(key.to_string(), parsed);
        let next: RunConfig =
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    Error::Config(format!("{key}={value}: {}", e.message()))
                })?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} must look like key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model_config().validate()?;
        self.synth_config().validate()?;
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!(
                "holdout must lie in [0, 1), got {}",
                self.holdout
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.lambda_c,
            lambda_a: self.lambda_a,
            lambda_st: self.lambda_st,
            alpha: self.alpha,
            delta: self.delta,
            tau: self.tau,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weights: self.weights(),
            warmup_epochs: self.warmup_epochs,
            seed: self.seed,
            eval_every: self.eval_every,
            grad_clip: self.grad_clip,
            augment: AugmentConfig {
                max_rotation_deg: self.max_rotation_deg,
                hflip_prob: self.hflip_prob,
                vflip_prob: self.vflip_prob,
            },
            use_attribute_text: self.use_attribute_text,
            attr_heads: self.attr_heads(),
        }
    }

    pub fn attr_heads(&self) -> [bool; NUM_ATTRIBUTES] {
        [
            self.head_side,
            self.head_count,
            self.head_left,
            self.head_right,
        ]
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            in_channels: 1,
            base_width: self.base_width,
            depth: self.depth,
            norm_groups: self.norm_groups,
            text_dim: self.text_dim,
            text_len: self.text_len,
            head_hidden: self.head_hidden,
            use_aica: self.use_aica,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.height,
            width: self.width,
            seed: self.seed,
            max_blobs: self.max_blobs,
            blob_scale_min: self.blob_scale_min,
            blob_scale_max: self.blob_scale_max,
            noise_std: self.noise_std,
            tau: self.tau,
            saliency_cell: self.saliency_cell,
            saliency_noise: self.saliency_noise,
            saliency_noise_grid: self.saliency_noise_grid,
            ..SynthConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.batch_size, c.warmup_epochs), (1e-4, 12, 5));
        assert_eq!((c.lambda_c, c.lambda_a, c.lambda_st), (1.0, 0.9, 1.0));
        assert_eq!((c.alpha, c.delta, c.tau), (0.5, 0.7, 0.5));
        assert_eq!((c.height, c.width), (224, 224));
        c.validate().unwrap();
    }

    #[test]
    fn file_and_overrides_round_trip() {
        let mut c =
            RunConfig::from_toml_str("epochs = 3\nlambda_st = 0.3\nmode = \"transductive\"\n")
                .unwrap();
        assert_eq!(
            (c.epochs, c.lambda_st, c.mode),
            (3, 0.3, FitMode::Transductive)
        );
        c.apply_overrides([
            "delta=0.9",
            "use_aica=false",
            "lambda_a=1",
            "mode=inductive",
        ])
        .unwrap();
        assert_eq!(
            (c.delta, c.use_aica, c.lambda_a, c.mode),
            (0.9, false, 1.0, FitMode::Inductive)
        );
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("delta", "1.5"), Err(Error::Config(_))));
        assert!(matches!(c.set("epochs", "many"), Err(Error::Config(_))));
        assert!(matches!(c.set("mode", "sideways"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("colour = 1").is_err());
        assert_eq!(c, RunConfig::default());
    }
}
