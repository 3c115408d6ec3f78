//! Training objectives with analytic gradients.
//!
//! Every function is generic over the float type so the same code drives f32
//! training and f64 gradient checks. Score maps, images and logits are flat
//! slices; logits use the `[batch][class][pixel]` layout.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, LossWeights, Result};

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Discriminator probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]`
/// before taking logarithms.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvVariant {
    /// Sigmoid cross-entropy on raw scores with the non-saturating generator
    /// objective.
    #[default]
    Log,
    /// Least-squares objective on raw scores (targets 1 for real, 0 for fake).
    LeastSquares,
}

/// Generator- and discriminator-side values of one adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvPair<F> {
    pub generator_loss: F,
    pub discriminator_loss: F,
}

fn c<F: Float>(v: f64) -> F {
    F::from(v).expect("float conversion")
}

fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Float>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

fn clamp_log_term<F: Float>(value: F, grad: F) -> (F, F) {
    let lo = c::<F>(-libm::log1p(-P_CLAMP));
    let hi = c::<F>(-libm::log(P_CLAMP));
    if value < lo {
        (lo, F::zero())
    } else if value > hi {
        (hi, F::zero())
    } else {
        (value, grad)
    }
}

/// `-log sigmoid(x)` and its derivative.
fn neg_log_sigmoid<F: Float>(x: F) -> (F, F) {
    clamp_log_term(softplus(-x), sigmoid(x) - F::one())
}

/// `-log(1 - sigmoid(x))` and its derivative.
fn neg_log_one_minus_sigmoid<F: Float>(x: F) -> (F, F) {
    clamp_log_term(softplus(x), sigmoid(x))
}

fn check_pair<F>(real: &[F], fake: &[F]) -> Result<()> {
    if real.len() != fake.len() {
        return Err(Error::invalid(format!(
            "score maps differ in size: {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    if real.is_empty() {
        return Err(Error::invalid("empty score map"));
    }
    Ok(())
}

/// Discriminator loss and its gradients with respect to both score maps.
pub fn adv_discriminator<F: Float>(real: &[F], fake: &[F], variant: AdvVariant) -> Result<(F, Vec<F>, Vec<F>)> {
    check_pair(real, fake)?;
    let n = c::<F>(real.len() as f64);
    let mut loss_real = F::zero();
    let mut loss_fake = F::zero();
    let mut g_real = Vec::with_capacity(real.len());
    let mut g_fake = Vec::with_capacity(fake.len());
    match variant {
        AdvVariant::Log => {
            for &x in real {
                let (v, g) = neg_log_sigmoid(x);
                loss_real = loss_real + v;
                g_real.push(g / n);
            }
            for &x in fake {
                let (v, g) = neg_log_one_minus_sigmoid(x);
                loss_fake = loss_fake + v;
                g_fake.push(g / n);
            }
        }
        AdvVariant::LeastSquares => {
            let two = c::<F>(2.0);
            for &x in real {
                let d = x - F::one();
                loss_real = loss_real + d * d;
                g_real.push(two * d / n);
            }
            for &x in fake {
                loss_fake = loss_fake + x * x;
                g_fake.push(two * x / n);
            }
        }
    }
    Ok((loss_real / n + loss_fake / n, g_real, g_fake))
}

/// Generator loss (scores of generated samples pushed toward "real") and its
/// gradient with respect to those scores.
pub fn adv_generator<F: Float>(fake: &[F], variant: AdvVariant) -> Result<(F, Vec<F>)> {
    if fake.is_empty() {
        return Err(Error::invalid("empty score map"));
    }
    let n = c::<F>(fake.len() as f64);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(fake.len());
    for &x in fake {
        let (v, g) = match variant {
            AdvVariant::Log => neg_log_sigmoid(x),
            AdvVariant::LeastSquares => {
                let d = x - F::one();
                (d * d, c::<F>(2.0) * d)
            }
        };
        loss = loss + v;
        grad.push(g / n);
    }
    Ok((loss / n, grad))
}

/// Adversarial objective between real-class and fake-class score maps.
pub fn adv_loss<F: Float>(d_on_real: &[F], d_on_fake: &[F], variant: AdvVariant) -> Result<AdvPair<F>> {
    let (discriminator_loss, _, _) = adv_discriminator(d_on_real, d_on_fake, variant)?;
    let (generator_loss, _) = adv_generator(d_on_fake, variant)?;
    Ok(AdvPair { generator_loss, discriminator_loss })
}

/// Prediction-space objective: scores on predictions for synthesized images
/// form the real class, scores on predictions for target images the fake one.
pub fn adv_loss_p<F: Float>(dp_on_syn_pred: &[F], dp_on_target_pred: &[F], variant: AdvVariant) -> Result<AdvPair<F>> {
    adv_loss(dp_on_syn_pred, dp_on_target_pred, variant)
}

/// Generated-image-space objective on the source discriminator's auxiliary
/// head: reconstructions of synthesized images are the real class, images
/// generated from target inputs the fake one.
pub fn adv_loss_aux_s<F: Float>(
    ds_aux_on_rec_syn: &[F],
    ds_aux_on_gen_from_target: &[F],
    variant: AdvVariant,
) -> Result<AdvPair<F>> {
    adv_loss(ds_aux_on_rec_syn, ds_aux_on_gen_from_target, variant)
}

/// Mean absolute error `mean |rec - x|` and its gradient with respect to `rec`.
///
/// The subgradient at zero residual is zero.
pub fn l1_mean<F: Float>(x: &[F], rec: &[F]) -> Result<(F, Vec<F>)> {
    if x.len() != rec.len() {
        return Err(Error::invalid(format!("image sizes differ: {} vs {}", x.len(), rec.len())));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let n = c::<F>(x.len() as f64);
    let mut sum = F::zero();
    let grad = x
        .iter()
        .zip(rec)
        .map(|(&a, &r)| {
            let d = r - a;
            sum = sum + d.abs();
            if d > F::zero() {
                F::one() / n
            } else if d < F::zero() {
                -F::one() / n
            } else {
                F::zero()
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Source cycle plus target cycle, each as a per-pixel mean absolute error.
pub fn cycle_loss<F: Float>(x_s: &[F], rec_s: &[F], x_t: &[F], rec_t: &[F]) -> Result<F> {
    Ok(l1_mean(x_s, rec_s)?.0 + l1_mean(x_t, rec_t)?.0)
}

/// Components of the hybrid segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLoss<F> {
    pub cross_entropy: F,
    pub dice_loss: F,
    pub total: F,
}

struct SegLayout {
    batch: usize,
    classes: usize,
    pixels: usize,
}

fn seg_layout<F>(logits: &[F], labels: &[u8], batch: usize, classes: usize) -> Result<SegLayout> {
    if batch == 0 || classes < 2 || labels.is_empty() || !labels.len().is_multiple_of(batch) {
        return Err(Error::invalid("segmentation batch must be nonempty with at least two classes"));
    }
    if logits.len() != labels.len() * classes {
        return Err(Error::invalid(format!(
            "logits hold {} values, expected {} pixels x {} classes",
            logits.len(),
            labels.len(),
            classes
        )));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::InvalidLabel { label, index, classes });
    }
    Ok(SegLayout { batch, classes, pixels: labels.len() / batch })
}

fn softmax_probs<F: Float>(logits: &[F], layout: &SegLayout) -> Vec<F> {
    let SegLayout { batch, classes, pixels } = *layout;
    let mut probs = vec![F::zero(); logits.len()];
    for n in 0..batch {
        let base = n * classes * pixels;
        for p in 0..pixels {
            let at = |k: usize| base + k * pixels + p;
            let max = (0..classes).map(|k| logits[at(k)]).fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for k in 0..classes {
                let e = (logits[at(k)] - max).exp();
                probs[at(k)] = e;
                sum = sum + e;
            }
            for k in 0..classes {
                probs[at(k)] = probs[at(k)] / sum;
            }
        }
    }
    probs
}

/// Hybrid loss `H(y, p) + alpha * DiceLoss(y, p)` on `softmax(logits)`.
///
/// `H` is the mean per-pixel cross-entropy. The soft Dice loss is
/// `1 - mean_k (2 sum p_k y_k + eps) / (sum p_k + sum y_k + eps)` over all
/// classes, background included, with sums running over the whole batch.
pub fn seg_loss<F: Float>(logits: &[F], labels: &[u8], batch: usize, classes: usize, alpha: F) -> Result<SegLoss<F>> {
    seg_loss_grad(logits, labels, batch, classes, alpha).map(|(loss, _)| loss)
}

/// [`seg_loss`] together with its gradient with respect to the logits.
pub fn seg_loss_grad<F: Float>(
    logits: &[F],
    labels: &[u8],
    batch: usize,
    classes: usize,
    alpha: F,
) -> Result<(SegLoss<F>, Vec<F>)> {
    if !(alpha >= F::zero()) {
        return Err(Error::config("alpha", "must be nonnegative"));
    }
    let layout = seg_layout(logits, labels, batch, classes)?;
    let SegLayout { pixels, .. } = layout;
    let probs = softmax_probs(logits, &layout);
    let total_pixels = c::<F>(labels.len() as f64);
    let eps = c::<F>(DICE_EPS);

    let mut ce = F::zero();
    let mut inter = vec![F::zero(); classes];
    let mut psum = vec![F::zero(); classes];
    let mut ysum = vec![F::zero(); classes];
    for (i, &label) in labels.iter().enumerate() {
        let (n, p) = (i / pixels, i % pixels);
        let base = n * classes * pixels + p;
        let y = label as usize;
        ce = ce - probs[base + y * pixels].max(F::min_positive_value()).ln();
        for k in 0..classes {
            psum[k] = psum[k] + probs[base + k * pixels];
        }
        inter[y] = inter[y] + probs[base + y * pixels];
        ysum[y] = ysum[y] + F::one();
    }
    let cross_entropy = ce / total_pixels;

    let kf = c::<F>(classes as f64);
    let two = c::<F>(2.0);
    let mut dice_mean = F::zero();
    // d DiceLoss / d p_k = -(1/K) [2 y_k / den_k - num_k / den_k^2]
    let mut dp_on = vec![F::zero(); classes];
    let mut dp_off = vec![F::zero(); classes];
    for k in 0..classes {
        let num = two * inter[k] + eps;
        let den = psum[k] + ysum[k] + eps;
        dice_mean = dice_mean + num / den;
        dp_off[k] = num / (den * den) / kf;
        dp_on[k] = dp_off[k] - two / den / kf;
    }
    let dice_loss = F::one() - dice_mean / kf;

    let mut grad = vec![F::zero(); logits.len()];
    let mut gp = vec![F::zero(); classes];
    for (i, &label) in labels.iter().enumerate() {
        let (n, p) = (i / pixels, i % pixels);
        let base = n * classes * pixels + p;
        let y = label as usize;
        let mut dot = F::zero();
        for k in 0..classes {
            gp[k] = if k == y { dp_on[k] } else { dp_off[k] };
            dot = dot + probs[base + k * pixels] * gp[k];
        }
        for k in 0..classes {
            let pk = probs[base + k * pixels];
            let onehot = if k == y { F::one() } else { F::zero() };
            let g_ce = (pk - onehot) / total_pixels;
            let g_dice = pk * (gp[k] - dot);
            grad[base + k * pixels] = g_ce + alpha * g_dice;
        }
    }
    let loss = SegLoss { cross_entropy, dice_loss, total: cross_entropy + alpha * dice_loss };
    Ok((loss, grad))
}

/// Values of the six terms of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub adv_t: f64,
    pub adv_s: f64,
    pub cyc: f64,
    pub seg: f64,
    pub adv_p: f64,
    pub adv_s_tilde: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("adv_t", self.adv_t),
            ("adv_s", self.adv_s),
            ("cyc", self.cyc),
            ("seg", self.seg),
            ("adv_p", self.adv_p),
            ("adv_s_tilde", self.adv_s_tilde),
        ]
    }
}

/// `adv_t + l_adv_s adv_s + l_cyc cyc + l_seg seg + l_adv_p adv_p + l_adv_s~ adv_s~`.
pub fn total_loss(parts: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (component, value) in parts.named() {
        if !value.is_finite() {
            return Err(Error::NonFinite { component });
        }
    }
    Ok(parts.adv_t
        + w.lambda_adv_s * parts.adv_s
        + w.lambda_cyc * parts.cyc
        + w.lambda_seg * parts.seg
        + w.lambda_adv_p * parts.adv_p
        + w.lambda_adv_s_tilde * parts.adv_s_tilde)
}

/// One training-log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub parts: LossComponents,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv_t,adv_s,cyc,seg,adv_p,adv_s_tilde,total";

    pub fn new(step: u64, parts: LossComponents, w: &LossWeights) -> Result<Self> {
        Ok(Self { step, parts, total: total_loss(&parts, w)? })
    }

    pub fn csv_line(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, p.adv_t, p.adv_s, p.cyc, p.seg, p.adv_p, p.adv_s_tilde, self.total
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 8 {
            return Err(Error::invalid(format!("loss log line has {} fields, expected 8", fields.len())));
        }
        let step = fields[0].parse().map_err(|_| Error::invalid("bad step field"))?;
        let mut vals = [0.0f64; 7];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|_| Error::invalid(format!("bad numeric field `{f}`")))?;
        }
        Ok(Self {
            step,
            parts: LossComponents {
                adv_t: vals[0],
                adv_s: vals[1],
                cyc: vals[2],
                seg: vals[3],
                adv_p: vals[4],
                adv_s_tilde: vals[5],
            },
            total: vals[6],
        })
    }
}
