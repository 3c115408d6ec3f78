//! Flat TOML run configuration. Every key is optional; command-line flags
//! override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sifa_core::losses::AdvVariant;
use sifa_core::schedule::{AblationMode, OptimizerSchedule};
use sifa_core::LossWeights;

use crate::error::{Error, IoContext, Result};
use crate::models::Widths;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
    /// Canvas side length of generated data.
    pub size: usize,
    pub scenes: usize,
    pub train_ratio: f64,
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub classes: usize,
    pub augment: bool,
    pub checkpoint_every: u64,

    pub lambda_adv_s: f64,
    pub lambda_cyc: f64,
    pub lambda_seg: f64,
    pub lambda_adv_p: f64,
    pub lambda_adv_s_tilde: f64,
    pub dice_alpha: f64,

    pub adversarial_lr: f64,
    pub segmentation_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,

    /// `log` or `least_squares`.
    pub adv_variant: String,
    pub route_adv_p_to_classifier: bool,
    pub split_encoder_update: bool,

    /// `[divisor, minimum]` channel scaling per family.
    pub generator_width: [usize; 2],
    pub encoder_width: [usize; 2],
    pub decoder_width: [usize; 2],
    pub discriminator_width: [usize; 2],
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = t.weights;
        let s = t.schedule;
        let pair = |p: (usize, usize)| [p.0, p.1];
        Self {
            name: "run".into(),
            data_dir: "data".into(),
            runs_dir: "runs".into(),
            size: 64,
            scenes: 200,
            train_ratio: 0.8,
            mode: t.mode.as_str().into(),
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            classes: t.classes,
            augment: t.augment,
            checkpoint_every: 500,
            lambda_adv_s: w.lambda_adv_s,
            lambda_cyc: w.lambda_cyc,
            lambda_seg: w.lambda_seg,
            lambda_adv_p: w.lambda_adv_p,
            lambda_adv_s_tilde: w.lambda_adv_s_tilde,
            dice_alpha: w.alpha,
            adversarial_lr: s.adversarial_lr,
            segmentation_lr: s.segmentation_lr,
            lr_decay: s.decay,
            lr_decay_every: s.decay_every,
            adv_variant: "log".into(),
            route_adv_p_to_classifier: t.route_adv_p_to_classifier,
            split_encoder_update: t.split_encoder_update,
            generator_width: pair(t.widths.generator),
            encoder_width: pair(t.widths.encoder),
            decoder_width: pair(t.widths.decoder),
            discriminator_width: pair(t.widths.discriminator),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mode(&self) -> Result<AblationMode> {
        Ok(self.mode.parse()?)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }

    /// Validates everything and builds the trainer configuration.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg_err = |field: &'static str, reason: &str| Error::from(sifa_core::Error::config(field, reason));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(cfg_err("name", "must be a plain directory name"));
        }
        if self.size < 32 || !self.size.is_multiple_of(8) {
            return Err(cfg_err("size", "must be a multiple of 8 and at least 32"));
        }
        if self.scenes == 0 {
            return Err(cfg_err("scenes", "need at least one scene"));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(cfg_err("train_ratio", "must lie strictly between 0 and 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(cfg_err("checkpoint_every", "must be positive"));
        }
        let adv_variant = match self.adv_variant.as_str() {
            "log" => AdvVariant::Log,
            "least_squares" => AdvVariant::LeastSquares,
            _ => return Err(cfg_err("adv_variant", "expected `log` or `least_squares`")),
        };
        let widths = [self.generator_width, self.encoder_width, self.decoder_width, self.discriminator_width];
        if widths.iter().any(|w| w[0] == 0 || w[1] == 0) {
            return Err(cfg_err("width", "divisor and minimum must be positive"));
        }
        let defaults = OptimizerSchedule::default();
        let t = TrainConfig {
            classes: self.classes,
            widths: Widths {
                generator: self.generator_width.into(),
                encoder: self.encoder_width.into(),
                decoder: self.decoder_width.into(),
                discriminator: self.discriminator_width.into(),
            },
            weights: LossWeights {
                lambda_adv_s: self.lambda_adv_s,
                lambda_cyc: self.lambda_cyc,
                lambda_seg: self.lambda_seg,
                lambda_adv_p: self.lambda_adv_p,
                lambda_adv_s_tilde: self.lambda_adv_s_tilde,
                alpha: self.dice_alpha,
            },
            schedule: OptimizerSchedule {
                adversarial_lr: self.adversarial_lr,
                segmentation_lr: self.segmentation_lr,
                decay: self.lr_decay,
                decay_every: self.lr_decay_every,
                ..defaults
            },
            mode: self.mode()?,
            adv_variant,
            route_adv_p_to_classifier: self.route_adv_p_to_classifier,
            split_encoder_update: self.split_encoder_update,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            augment: self.augment,
        };
        t.validate()?;
        Ok(t)
    }
}
