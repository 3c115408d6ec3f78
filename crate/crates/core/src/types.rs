//! Domain types shared by every stage of the pipeline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::{Error, Result};

/// Background plus the four cardiac structures (AA, LAC, LVC, MYO).
pub const DEFAULT_CLASSES: usize = 5;

/// Which domain an image belongs to, or which generator produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainTag {
    Source,
    Target,
    /// `G_t(x_s)`: a source image rendered with target appearance.
    SynthesizedTarget,
    /// `U(E(.))`: an image mapped back into source appearance.
    ReconstructedSource,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
            DomainTag::SynthesizedTarget => "synthesized_target",
            DomainTag::ReconstructedSource => "reconstructed_source",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            DomainTag::Source => 0,
            DomainTag::Target => 1,
            DomainTag::SynthesizedTarget => 2,
            DomainTag::ReconstructedSource => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DomainTag::Source),
            1 => Some(DomainTag::Target),
            2 => Some(DomainTag::SynthesizedTarget),
            3 => Some(DomainTag::ReconstructedSource),
            _ => None,
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            "synthesized_target" => Ok(DomainTag::SynthesizedTarget),
            "reconstructed_source" => Ok(DomainTag::ReconstructedSource),
            other => Err(Error::invalid(format!("unknown domain `{other}`"))),
        }
    }
}

/// Single-channel 2D intensity image stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
    domain: DomainTag,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>, domain: DomainTag) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "image payload has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data, domain })
    }

    pub fn filled(height: usize, width: usize, value: f32, domain: DomainTag) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], domain)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Population mean and standard deviation, accumulated in f64.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
        (mean, libm::sqrt(var))
    }

    /// Ensures the encoder's three 2x down-samplings divide the image evenly.
    pub fn check_divisible_by_8(&self) -> Result<()> {
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible by 8",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Per-slice z-score normalization with the population standard deviation.
///
/// Constant images have no defined scale and map to all zeros.
pub fn normalize_zscore(image: &Image) -> Result<Image> {
    if image.data.is_empty() {
        return Err(Error::invalid("cannot normalize an empty image"));
    }
    let first = image.data[0];
    if image.data.iter().all(|&v| v == first) {
        return Ok(Image { data: vec![0.0; image.data.len()], ..image.clone() });
    }
    let (mean, std) = image.mean_std();
    let data = image.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    Ok(Image { data, ..image.clone() })
}

/// Clamps a z-scored image to `±clip` standard deviations and rescales it
/// into `[-1, 1]`, the output range of the tanh-terminated generators.
pub fn fit_unit_range(image: &Image, clip: f32) -> Result<Image> {
    if !(clip > 0.0) {
        return Err(Error::config("clip", "must be positive"));
    }
    let data = image.data.iter().map(|&v| v.clamp(-clip, clip) / clip).collect();
    Ok(Image { data, ..image.clone() })
}

/// Integer class map with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if !(1..=256).contains(&classes) {
            return Err(Error::invalid(format!("class count {classes} out of range")));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "mask payload has {} labels, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some((index, &label)) = data.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::InvalidLabel { label, index, classes });
        }
        Ok(Self { height, width, classes, data })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Result<Self> {
        Self::new(height, width, classes, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }

    /// Sorted set of labels present in the mask.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// Per-pixel class probabilities, stored channel-major (`K` planes of `H*W`).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrediction {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f32>,
}

impl SoftPrediction {
    /// Softmax over the class axis of channel-major logits.
    pub fn from_logits(height: usize, width: usize, classes: usize, logits: &[f32]) -> Result<Self> {
        let pixels = height * width;
        if classes == 0 || logits.len() != classes * pixels {
            return Err(Error::invalid("logit buffer does not match H x W x K"));
        }
        let mut probs = vec![0.0f32; logits.len()];
        for p in 0..pixels {
            let max = (0..classes).map(|k| logits[k * pixels + p]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for k in 0..classes {
                let e = libm::exp((logits[k * pixels + p] - max) as f64);
                probs[k * pixels + p] = e as f32;
                sum += e;
            }
            for k in 0..classes {
                probs[k * pixels + p] = (probs[k * pixels + p] as f64 / sum) as f32;
            }
        }
        Ok(Self { height, width, classes, probs })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn prob(&self, class: usize, row: usize, col: usize) -> f32 {
        self.probs[class * self.height * self.width + row * self.width + col]
    }
}

pub fn one_hot(mask: &LabelMask, classes: usize) -> Result<SoftPrediction> {
    let pixels = mask.height * mask.width;
    if let Some((index, &label)) = mask.data.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::InvalidLabel { label, index, classes });
    }
    let mut probs = vec![0.0f32; classes * pixels];
    for (p, &label) in mask.data.iter().enumerate() {
        probs[label as usize * pixels + p] = 1.0;
    }
    Ok(SoftPrediction { height: mask.height, width: mask.width, classes, probs })
}

/// Most probable class per pixel; ties resolve to the lowest class index.
pub fn argmax(pred: &SoftPrediction) -> LabelMask {
    let pixels = pred.height * pred.width;
    let data = (0..pixels)
        .map(|p| {
            let mut best = 0;
            for k in 1..pred.classes {
                if pred.probs[k * pixels + p] > pred.probs[best * pixels + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask { height: pred.height, width: pred.width, classes: pred.classes, data }
}

/// Trade-off coefficients of the overall objective plus the Dice weight of the
/// hybrid segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_adv_s: f64,
    pub lambda_cyc: f64,
    pub lambda_seg: f64,
    pub lambda_adv_p: f64,
    pub lambda_adv_s_tilde: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv_s: 1.0,
            lambda_cyc: 10.0,
            lambda_seg: 1.0,
            lambda_adv_p: 1.0,
            lambda_adv_s_tilde: 1.0,
            alpha: 1.0,
        }
    }
}

impl LossWeights {
    pub fn uniform(value: f64) -> Self {
        Self {
            lambda_adv_s: value,
            lambda_cyc: value,
            lambda_seg: value,
            lambda_adv_p: value,
            lambda_adv_s_tilde: value,
            alpha: value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_adv_s", self.lambda_adv_s),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_seg", self.lambda_seg),
            ("lambda_adv_p", self.lambda_adv_p),
            ("lambda_adv_s_tilde", self.lambda_adv_s_tilde),
            ("alpha", self.alpha),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
            if value < 0.0 {
                return Err(Error::config(name, format!("must be nonnegative, got {value}")));
            }
        }
        if self.lambda_seg == 0.0 {
            return Err(Error::config("lambda_seg", "must be positive, otherwise nothing is supervised"));
        }
        Ok(())
    }
}

pub fn validate_loss_weights(w: &LossWeights) -> Result<()> {
    w.validate()
}

/// An image with its label map, when one is available to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: Option<LabelMask>,
}

impl Sample {
    pub fn new(image: Image, mask: Option<LabelMask>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.height != image.height || m.width != image.width {
                return Err(Error::Consistency(format!(
                    "image is {}x{} but mask is {}x{}",
                    image.height, image.width, m.height, m.width
                )));
            }
        }
        Ok(Self { image, mask })
    }

    pub fn unlabeled(image: Image) -> Self {
        Self { image, mask: None }
    }

    /// Drops the mask, as done for target-domain training data.
    pub fn without_mask(&self) -> Self {
        Self { image: self.image.clone(), mask: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, data: Vec<f32>) -> Image {
        Image::new(h, w, data, DomainTag::Source).unwrap()
    }

    #[test]
    fn constant_image_normalizes_to_zeros() {
        let out = normalize_zscore(&Image::filled(4, 4, 7.0, DomainTag::Source).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_pixel_zscore() {
        // mean 2, population std 1
        let out = normalize_zscore(&img(1, 2, vec![1.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn empty_image_rejected() {
        assert!(Image::new(0, 4, vec![], DomainTag::Source).is_err());
    }

    #[test]
    fn normalized_moments() {
        let data: Vec<f32> = (0..64).map(|i| ((i * 37) % 11) as f32 * 0.7 + 3.0).collect();
        let out = normalize_zscore(&img(8, 8, data)).unwrap();
        let (mean, std) = out.mean_std();
        assert!(mean.abs() <= 1e-5);
        assert!((std - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn one_hot_corners() {
        let mask = LabelMask::new(1, 2, 5, vec![0, 4]).unwrap();
        let oh = one_hot(&mask, 5).unwrap();
        let at = |p: usize| (0..5).map(|k| oh.probs()[k * 2 + p]).collect::<Vec<_>>();
        assert_eq!(at(0), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(at(1), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_matches_loop_oracle() {
        let mask = LabelMask::new(2, 2, 5, vec![0, 1, 2, 3]).unwrap();
        let oh = one_hot(&mask, 5).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                for k in 0..5 {
                    let expected = if mask.get(r, c) as usize == k { 1.0 } else { 0.0 };
                    assert_eq!(oh.prob(k, r, c), expected);
                }
            }
        }
    }

    #[test]
    fn one_hot_rejects_out_of_range_label() {
        let mask = LabelMask::new(1, 2, 8, vec![0, 6]).unwrap();
        assert!(matches!(one_hot(&mask, 5), Err(Error::InvalidLabel { label: 6, index: 1, .. })));
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::uniform(1.0).validate().is_ok());
        let w = LossWeights { lambda_cyc: -0.1, ..LossWeights::uniform(1.0) };
        assert!(matches!(w.validate(), Err(Error::Config { field: "lambda_cyc", .. })));
        let w = LossWeights { lambda_seg: 0.0, ..LossWeights::uniform(1.0) };
        assert!(matches!(validate_loss_weights(&w), Err(Error::Config { field: "lambda_seg", .. })));
    }

    #[test]
    fn sample_shape_mismatch() {
        let image = img(2, 2, vec![0.0; 4]);
        let mask = LabelMask::zeros(2, 3, 5).unwrap();
        assert!(matches!(Sample::new(image, Some(mask)), Err(Error::Consistency(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits: Vec<f32> = (0..5 * 6).map(|i| (i as f32 * 0.77).sin() * 8.0).collect();
        let sp = SoftPrediction::from_logits(2, 3, 5, &logits).unwrap();
        for p in 0..6 {
            let s: f32 = (0..5).map(|k| sp.probs()[k * 6 + p]).sum();
            assert!((s - 1.0).abs() <= 1e-5);
        }
    }

    proptest! {
        #[test]
        fn zscore_idempotent(data in proptest::collection::vec(-50.0f32..50.0, 16)) {
            let first = data[0];
            prop_assume!(data.iter().any(|&v| (v - first).abs() > 1e-2));
            let once = normalize_zscore(&img(4, 4, data)).unwrap();
            let twice = normalize_zscore(&once).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn one_hot_argmax_roundtrip(labels in proptest::collection::vec(0u8..5, 48)) {
            let mask = LabelMask::new(6, 8, 5, labels).unwrap();
            let back = argmax(&one_hot(&mask, 5).unwrap());
            prop_assert_eq!(back, mask);
        }
    }
}
