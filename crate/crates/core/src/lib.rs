//! Building blocks for synergistic image and feature adaptation in 2D
//! segmentation.
//!
//! Everything in this crate is a pure function of its inputs and runs without
//! `std`: domain types and preprocessing, the adversarial, cycle and hybrid
//! segmentation objectives (with analytic gradients), Dice/ASD evaluation,
//! declarative layer stacks for the seven sub-networks together with shape and
//! receptive-field arithmetic, the synthetic two-domain scene generator,
//! augmentation, splitting, and the binary sample codec.
//!
//! The companion `sifa` crate realizes the networks, runs training and owns
//! all file and command-line IO.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod arch;
pub mod codec;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod schedule;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    argmax, fit_unit_range, normalize_zscore, one_hot, DomainTag, Image, LabelMask, LossWeights, Sample,
    SoftPrediction, DEFAULT_CLASSES,
};
