//! Learning-rate schedule and the ablation ladder.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::{Error, LossWeights, Result};

/// Adam learning rates for the two update groups.
///
/// Adversarially trained groups keep a constant rate; the segmentation group
/// decays by `decay` every `decay_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSchedule {
    pub adversarial_lr: f64,
    pub segmentation_lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub adversarial_betas: (f64, f64),
    pub segmentation_betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimizerSchedule {
    fn default() -> Self {
        Self {
            adversarial_lr: 2e-4,
            segmentation_lr: 1e-3,
            decay: 0.9,
            decay_every: 2,
            adversarial_betas: (0.5, 0.999),
            segmentation_betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl OptimizerSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.adversarial_lr > 0.0) || !self.adversarial_lr.is_finite() {
            return Err(Error::config("adversarial_lr", "must be positive"));
        }
        if !(self.segmentation_lr > 0.0) || !self.segmentation_lr.is_finite() {
            return Err(Error::config("segmentation_lr", "must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay", "must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every", "must be positive"));
        }
        for (field, (b1, b2)) in [("adversarial_betas", self.adversarial_betas), ("segmentation_betas", self.segmentation_betas)] {
            if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
                return Err(Error::config(field, "betas must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn adversarial_lr_at(&self, _epoch: usize) -> f64 {
        self.adversarial_lr
    }

    pub fn segmentation_lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_every) as i32;
        self.segmentation_lr * libm::pow(self.decay, steps as f64)
    }
}

/// Rungs of the ablation ladder, from no adaptation to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AblationMode {
    /// Encoder and classifier trained on raw source images only.
    NoAdapt,
    /// Image adaptation without either feature-adaptation loss.
    ImageOnly,
    /// Image adaptation plus prediction-space feature adaptation.
    ImagePlusFap,
    /// Everything enabled.
    #[default]
    Full,
}

impl AblationMode {
    pub const LADDER: [AblationMode; 4] =
        [AblationMode::NoAdapt, AblationMode::ImageOnly, AblationMode::ImagePlusFap, AblationMode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::NoAdapt => "no_adapt",
            AblationMode::ImageOnly => "image_only",
            AblationMode::ImagePlusFap => "image_plus_fap",
            AblationMode::Full => "full",
        }
    }

    /// Row label in the comparison table.
    /// The ladder in order.
    pub const ALL: [AblationMode; 4] =
        [AblationMode::NoAdapt, AblationMode::ImageOnly, AblationMode::ImagePlusFap, AblationMode::Full];

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::NoAdapt => "W/o adaptation",
            AblationMode::ImageOnly => "+Image adaptation",
            AblationMode::ImagePlusFap => "+FA-P",
            AblationMode::Full => "+FA-I",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_adapt" => Ok(AblationMode::NoAdapt),
            "image_only" => Ok(AblationMode::ImageOnly),
            "image_plus_fap" => Ok(AblationMode::ImagePlusFap),
            "full" => Ok(AblationMode::Full),
            other => Err(Error::invalid(format!("unknown ablation mode `{other}`"))),
        }
    }
}

/// Which sub-networks take part in training under an ablation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveSet {
    pub generator_t: bool,
    pub discriminator_t: bool,
    pub encoder: bool,
    pub classifier: bool,
    pub decoder_u: bool,
    pub discriminator_s: bool,
    pub discriminator_p: bool,
    /// Whether the segmentation loss sees `G_t(x_s)` (true) or raw `x_s`.
    pub segment_translated: bool,
    /// Whether the source discriminator's auxiliary head is trained.
    pub aux_head: bool,
}

/// Effective weights and active networks for an ablation rung.
pub fn configure_ablation(mode: AblationMode, w: &LossWeights) -> (LossWeights, ActiveSet) {
    let mut eff = *w;
    let all = ActiveSet {
        generator_t: true,
        discriminator_t: true,
        encoder: true,
        classifier: true,
        decoder_u: true,
        discriminator_s: true,
        discriminator_p: true,
        segment_translated: true,
        aux_head: true,
    };
    let active = match mode {
        AblationMode::Full => all,
        AblationMode::ImagePlusFap => {
            eff.lambda_adv_s_tilde = 0.0;
            ActiveSet { aux_head: false, ..all }
        }
        AblationMode::ImageOnly => {
            eff.lambda_adv_p = 0.0;
            eff.lambda_adv_s_tilde = 0.0;
            ActiveSet { discriminator_p: false, aux_head: false, ..all }
        }
        AblationMode::NoAdapt => {
            eff = LossWeights {
                lambda_adv_s: 0.0,
                lambda_cyc: 0.0,
                lambda_seg: w.lambda_seg,
                lambda_adv_p: 0.0,
                lambda_adv_s_tilde: 0.0,
                alpha: w.alpha,
            };
            ActiveSet {
                generator_t: false,
                discriminator_t: false,
                encoder: true,
                classifier: true,
                decoder_u: false,
                discriminator_s: false,
                discriminator_p: false,
                segment_translated: false,
                aux_head: false,
            }
        }
    };
    (eff, active)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_decay() {
        let s = OptimizerSchedule::default();
        assert_eq!(s.segmentation_lr_at(0), 1e-3);
        assert_eq!(s.segmentation_lr_at(1), 1e-3);
        assert!((s.segmentation_lr_at(4) - 8.1e-4).abs() < 1e-15);
        for e in [0, 3, 17, 40] {
            assert_eq!(s.adversarial_lr_at(e), 2e-4);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(OptimizerSchedule::default().validate().is_ok());
        let bad = OptimizerSchedule { segmentation_lr: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "segmentation_lr", .. })));
    }

    #[test]
    fn ablation_weights() {
        let w = LossWeights::default();
        assert_eq!(configure_ablation(AblationMode::Full, &w).0, w);
        let (io, _) = configure_ablation(AblationMode::ImageOnly, &w);
        assert_eq!((io.lambda_adv_p, io.lambda_adv_s_tilde), (0.0, 0.0));
        assert_eq!((io.lambda_adv_s, io.lambda_cyc, io.lambda_seg), (w.lambda_adv_s, w.lambda_cyc, w.lambda_seg));
        let (fap, _) = configure_ablation(AblationMode::ImagePlusFap, &w);
        assert_eq!((fap.lambda_adv_p, fap.lambda_adv_s_tilde), (w.lambda_adv_p, 0.0));
        let (na, act) = configure_ablation(AblationMode::NoAdapt, &w);
        assert_eq!(
            [na.lambda_adv_s, na.lambda_cyc, na.lambda_adv_p, na.lambda_adv_s_tilde],
            [0.0; 4]
        );
        assert_eq!(na.lambda_seg, w.lambda_seg);
        assert!(!act.discriminator_t && !act.discriminator_s && !act.discriminator_p && !act.segment_translated);
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in AblationMode::LADDER {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }
}
