//! The synergistic update loop: seven sub-updates per step in the order
//! G_t, D_t, E, C, U, D_s, D_p, each with its own slice of the objective.

use sifa_core::data::{augment, stream_rng};
use sifa_core::losses::{adv_discriminator, adv_generator, l1_mean, seg_loss_grad, AdvVariant, LossComponents, LossReport};
use sifa_core::metrics::{evaluate, MetricReport, VolumePrediction};
use sifa_core::schedule::{configure_ablation, AblationMode, ActiveSet, OptimizerSchedule};
use sifa_core::{fit_unit_range, normalize_zscore, Error, Image, LabelMask, LossWeights, Result, Sample};

use crate::adam::Adam;
use crate::engine::{softmax_channels, softmax_channels_backward, Tensor};
use crate::models::{NetId, Nets, Widths};
use crate::net::{Grads, Mode, Network};

const SHUFFLE_SOURCE: u64 = 11;
const SHUFFLE_TARGET: u64 = 12;
const AUGMENT: u64 = 13;

/// Intensity clip (in standard deviations) applied before scaling images
/// into `[-1, 1]`.
pub const CLIP_SIGMAS: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub classes: usize,
    pub widths: Widths,
    pub weights: LossWeights,
    pub schedule: OptimizerSchedule,
    pub mode: AblationMode,
    pub adv_variant: AdvVariant,
    /// Also feed the prediction-space adversarial term into C.
    pub route_adv_p_to_classifier: bool,
    /// Apply E's adversarial and segmentation updates as two events.
    pub split_encoder_update: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes: sifa_core::DEFAULT_CLASSES,
            widths: Widths::DESK,
            weights: LossWeights::default(),
            schedule: OptimizerSchedule::default(),
            mode: AblationMode::Full,
            adv_variant: AdvVariant::Log,
            route_adv_p_to_classifier: false,
            split_encoder_update: false,
            batch_size: 8,
            epochs: 40,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (field, (d, m)) in [
            ("widths.generator", self.widths.generator),
            ("widths.encoder", self.widths.encoder),
            ("widths.decoder", self.widths.decoder),
            ("widths.discriminator", self.widths.discriminator),
        ] {
            if d == 0 || m == 0 {
                return Err(Error::config(field, "divisor and minimum must be positive"));
            }
        }
        Ok(())
    }
}

/// Optimizer state, one Adam per update group. E owns two: its adversarial
/// and cycle terms use the adversarial schedule, its segmentation term the
/// decaying one.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub g_t: Adam,
    pub d_t: Adam,
    pub e_adv: Adam,
    pub e_seg: Adam,
    pub c: Adam,
    pub u: Adam,
    pub d_s: Adam,
    pub d_p: Adam,
}

impl Optimizers {
    pub fn new(nets: &Nets, s: &OptimizerSchedule) -> Self {
        let adv = |id: NetId| Adam::new(&nets.get(id).params, s.adversarial_betas, s.eps);
        let seg = |id: NetId| Adam::new(&nets.get(id).params, s.segmentation_betas, s.eps);
        Self {
            g_t: adv(NetId::Gt),
            d_t: adv(NetId::Dt),
            e_adv: adv(NetId::E),
            e_seg: seg(NetId::E),
            c: seg(NetId::C),
            u: adv(NetId::U),
            d_s: adv(NetId::Ds),
            d_p: adv(NetId::Dp),
        }
    }

    /// Named view used by checkpoints.
    pub fn named(&self) -> [(&'static str, &Adam); 8] {
        [
            ("g_t", &self.g_t),
            ("d_t", &self.d_t),
            ("e_adv", &self.e_adv),
            ("e_seg", &self.e_seg),
            ("c", &self.c),
            ("u", &self.u),
            ("d_s", &self.d_s),
            ("d_p", &self.d_p),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Adam); 8] {
        [
            ("g_t", &mut self.g_t),
            ("d_t", &mut self.d_t),
            ("e_adv", &mut self.e_adv),
            ("e_seg", &mut self.e_seg),
            ("c", &mut self.c),
            ("u", &mut self.u),
            ("d_s", &mut self.d_s),
            ("d_p", &mut self.d_p),
        ]
    }
}

/// One parameter mutation of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateEvent {
    pub step: u64,
    pub net: NetId,
    /// The network's version counter after the update.
    pub version: u64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: Nets,
    pub opts: Optimizers,
    /// Completed steps.
    pub step: u64,
    /// Per-network parameter version counters.
    pub versions: [u64; 7],
    effective: LossWeights,
    active: ActiveSet,
}

/// One training batch: source images with labels and unlabeled target
/// images, all `[batch, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x_s: Tensor,
    pub y_s: Vec<u8>,
    pub x_t: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub events: Vec<UpdateEvent>,
}

/// Z-score, clip at `CLIP_SIGMAS` and scale into `[-1, 1]`.
pub fn preprocess(image: &Image) -> Result<Image> {
    fit_unit_range(&normalize_zscore(image)?, CLIP_SIGMAS)
}

pub fn preprocess_sample(sample: &Sample) -> Result<Sample> {
    Sample::new(preprocess(&sample.image)?, sample.mask.clone())
}

/// Preprocessed training material.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
}

impl TrainData {
    /// Preprocesses both domains and hides target masks.
    pub fn new(source: &[Sample], target: &[Sample]) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::invalid("both domains need at least one training sample"));
        }
        let (h, w) = (source[0].image.height(), source[0].image.width());
        for s in source.iter().chain(target) {
            if (s.image.height(), s.image.width()) != (h, w) {
                return Err(Error::Consistency("training samples differ in size".into()));
            }
            s.image.check_divisible_by_8()?;
        }
        if source.iter().any(|s| s.mask.is_none()) {
            return Err(Error::invalid("every source training sample needs a mask"));
        }
        Ok(Self {
            source: source.iter().map(preprocess_sample).collect::<Result<_>>()?,
            target: target.iter().map(|s| preprocess_sample(&s.without_mask())).collect::<Result<_>>()?,
        })
    }

    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        (self.source.len().min(self.target.len()) / batch).max(1)
    }
}

fn permutation(n: usize, seed: u64, epoch: u64, purpose: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = stream_rng(seed ^ purpose.rotate_left(40), epoch, purpose);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx
}

/// Assembles the batch of global step `step`. Shuffling and augmentation
/// derive from `(seed, epoch)` and `(seed, step)`, so any step can be
/// rebuilt without replaying earlier ones.
pub fn make_batch(data: &TrainData, config: &TrainConfig, step: u64) -> Batch {
    let b = config.batch_size;
    let per_epoch = data.steps_per_epoch(b) as u64;
    let (epoch, within) = (step / per_epoch, (step % per_epoch) as usize);
    let ps = permutation(data.source.len(), config.seed, epoch, SHUFFLE_SOURCE);
    let pt = permutation(data.target.len(), config.seed, epoch, SHUFFLE_TARGET);
    let pick = |perm: &[usize], i: usize| perm[(within * b + i) % perm.len()];
    let mut rng = stream_rng(config.seed, step, AUGMENT);
    let (h, w) = (data.source[0].image.height(), data.source[0].image.width());
    let mut xs = Vec::with_capacity(b * h * w);
    let mut ys = Vec::with_capacity(b * h * w);
    let mut xt = Vec::with_capacity(b * h * w);
    for i in 0..b {
        let mut s = data.source[pick(&ps, i)].clone();
        let mut t = data.target[pick(&pt, i)].clone();
        if config.augment {
            s = augment(&s, &mut rng);
            t = augment(&t, &mut rng);
        }
        xs.extend_from_slice(s.image.data());
        ys.extend_from_slice(s.mask.as_ref().expect("source masks checked").data());
        xt.extend_from_slice(t.image.data());
    }
    Batch { x_s: Tensor::from_vec(b, 1, h, w, xs), y_s: ys, x_t: Tensor::from_vec(b, 1, h, w, xt) }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn from_f64(like: &Tensor, g: &[f64], scale: f64) -> Tensor {
    Tensor::from_vec(like.n, like.c, like.h, like.w, g.iter().map(|&v| (v * scale) as f32).collect())
}

/// Values of channel `k` of every sample.
fn channel(t: &Tensor, k: usize) -> Vec<f64> {
    let p = t.plane();
    (0..t.n).flat_map(|i| t.sample(i)[k * p..(k + 1) * p].iter().map(|&v| v as f64)).collect()
}

/// Adds `scale * g` into channel `k` of `into`.
fn add_channel(into: &mut Tensor, k: usize, g: &[f64], scale: f64) {
    let p = into.plane();
    for i in 0..into.n {
        let dst = &mut into.sample_mut(i)[k * p..(k + 1) * p];
        for (d, &v) in dst.iter_mut().zip(&g[i * p..(i + 1) * p]) {
            *d += (v * scale) as f32;
        }
    }
}

fn finite(component: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { component })
    }
}

fn add(a: &mut Option<Tensor>, b: Tensor) {
    match a {
        Some(t) => t.add_assign(&b),
        None => *a = Some(b),
    }
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Nets::new(config.classes, &config.widths, config.seed)?;
        let opts = Optimizers::new(&nets, &config.schedule);
        let (effective, active) = configure_ablation(config.mode, &config.weights);
        Ok(Self { config, nets, opts, step: 0, versions: [0; 7], effective, active })
    }

    pub fn effective_weights(&self) -> &LossWeights {
        &self.effective
    }

    pub fn active(&self) -> &ActiveSet {
        &self.active
    }

    pub fn epoch(&self, steps_per_epoch: usize) -> usize {
        (self.step / steps_per_epoch.max(1) as u64) as usize
    }

    pub fn train_step(&mut self, batch: &Batch, steps_per_epoch: usize) -> Result<StepOutcome> {
        self.train_step_observed(batch, steps_per_epoch, &mut |_, _| {})
    }

    /// [`TrainState::train_step`] that calls `observer` right after every
    /// parameter update.
    pub fn train_step_observed(
        &mut self,
        batch: &Batch,
        steps_per_epoch: usize,
        observer: &mut dyn FnMut(&UpdateEvent, &Nets),
    ) -> Result<StepOutcome> {
        let h = batch.x_s.h;
        if batch.x_s.n == 0 || batch.x_t.n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if batch.x_s.shape() != batch.x_t.shape() || batch.y_s.len() != batch.x_s.n * h * batch.x_s.w {
            return Err(Error::Consistency("source and target batches disagree in shape".into()));
        }
        let epoch = self.epoch(steps_per_epoch);
        let lr_adv = self.config.schedule.adversarial_lr_at(epoch);
        let lr_seg = self.config.schedule.segmentation_lr_at(epoch);
        let mut step = StepRun { state: self, batch, events: Vec::new(), parts: LossComponents::default(), observer };
        step.run(lr_adv, lr_seg)?;
        let StepRun { events, parts, .. } = step;
        self.step += 1;
        let report = LossReport::new(self.step, parts, &self.effective)?;
        Ok(StepOutcome { report, events })
    }

    /// Predicted labels `argmax softmax(C(E(x)))` for one raw image.
    pub fn infer_segmentation(&self, image: &Image) -> Result<LabelMask> {
        infer_segmentation(&self.nets, image)
    }
}

pub fn infer_segmentation(nets: &Nets, image: &Image) -> Result<LabelMask> {
    image.check_divisible_by_8()?;
    let x = preprocess(image)?;
    let x = Tensor::from_vec(1, 1, x.height(), x.width(), x.into_data());
    let logits = nets.get(NetId::C).infer(&nets.get(NetId::E).infer(&x)?)?;
    let p = logits.plane();
    let labels = (0..p)
        .map(|q| {
            let mut best = 0;
            for k in 1..logits.c {
                if logits.data[k * p + q] > logits.data[best * p + q] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(logits.h, logits.w, logits.c, labels)
}

/// Segments every labeled sample and aggregates Dice/ASD, one single-slice
/// volume per sample.
pub fn evaluate_samples(nets: &Nets, samples: &[Sample]) -> Result<MetricReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let reference = s.mask.clone().ok_or_else(|| Error::invalid("evaluation samples need masks"))?;
        preds.push(VolumePrediction::single_slice(infer_segmentation(nets, &s.image)?, reference)?);
    }
    evaluate(&preds)
}

struct StepRun<'a> {
    state: &'a mut TrainState,
    batch: &'a Batch,
    events: Vec<UpdateEvent>,
    parts: LossComponents,
    observer: &'a mut dyn FnMut(&UpdateEvent, &Nets),
}

impl StepRun<'_> {
    fn net(&self, id: NetId) -> &Network {
        self.state.nets.get(id)
    }

    fn forward(&mut self, id: NetId, x: &Tensor, mode: Mode) -> Result<(Tensor, crate::net::Tape)> {
        self.state.nets.get_mut(id).forward(x, mode)
    }

    fn no_grad(&self, id: NetId, x: &Tensor) -> Result<Tensor> {
        self.net(id).forward_no_grad(x, Mode::Train)
    }

    fn apply(&mut self, id: NetId, which: &[(Which, &Grads)], lrs: (f64, f64)) {
        let st = &mut *self.state;
        let params = &mut st.nets.get_mut(id).params;
        for (w, g) in which {
            let (opt, lr) = match w {
                Which::Main => match id {
                    NetId::Gt => (&mut st.opts.g_t, lrs.0),
                    NetId::Dt => (&mut st.opts.d_t, lrs.0),
                    NetId::E => (&mut st.opts.e_adv, lrs.0),
                    NetId::C => (&mut st.opts.c, lrs.1),
                    NetId::U => (&mut st.opts.u, lrs.0),
                    NetId::Ds => (&mut st.opts.d_s, lrs.0),
                    NetId::Dp => (&mut st.opts.d_p, lrs.0),
                },
                Which::EncoderSeg => (&mut st.opts.e_seg, lrs.1),
            };
            opt.step(params, g, lr);
        }
        st.versions[id.index()] += 1;
        let event = UpdateEvent { step: st.step + 1, net: id, version: st.versions[id.index()] };
        self.events.push(event);
        (self.observer)(&event, &st.nets);
    }

    fn d_gen(&self, scores: &[f64]) -> Result<(f64, Vec<f64>)> {
        adv_generator(scores, self.state.config.adv_variant)
    }

    fn d_disc(&self, real: &[f64], fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        adv_discriminator(real, fake, self.state.config.adv_variant)
    }

    fn run(&mut self, lr_adv: f64, lr_seg: f64) -> Result<()> {
        let lrs = (lr_adv, lr_seg);
        let w = self.state.effective;
        let act = self.state.active;
        let b = self.batch;

        // G_t: its adversarial generator term plus both cycles
        if act.generator_t {
            let (_, grads) = self.generator_t_grads()?;
            self.apply(NetId::Gt, &[(Which::Main, &grads)], lrs);
        }

        // D_t: real target vs translated source
        let x_st = if act.segment_translated { Some(self.no_grad(NetId::Gt, &b.x_s)?) } else { None };
        if act.discriminator_t {
            let x_st = x_st.as_ref().expect("translation active");
            let (real, tape_r) = self.forward(NetId::Dt, &b.x_t, Mode::Train)?;
            let (fake, tape_f) = self.forward(NetId::Dt, x_st, Mode::Train)?;
            let (loss, gr, gf) = self.d_disc(&to_f64(&real), &to_f64(&fake))?;
            self.parts.adv_t = finite("adv_t", loss)?;
            let d = self.net(NetId::Dt);
            let mut grads = d.zero_grads();
            d.backward(&tape_r, from_f64(&real, &gr, 1.0), Some(&mut grads), false);
            d.backward(&tape_f, from_f64(&fake, &gf, 1.0), Some(&mut grads), false);
            self.apply(NetId::Dt, &[(Which::Main, &grads)], lrs);
        }

        // E: every term routed through the shared encoder
        let seg_input = x_st.clone().unwrap_or_else(|| b.x_s.clone());
        if self.state.config.split_encoder_update && act.decoder_u {
            let adv = self.encoder_grads(&seg_input, true, false)?;
            self.apply(NetId::E, &[(Which::Main, &adv.0)], lrs);
            let seg = self.encoder_grads(&seg_input, false, true)?;
            self.apply(NetId::E, &[(Which::EncoderSeg, &seg.1)], lrs);
        } else {
            let (adv, seg) = self.encoder_grads(&seg_input, act.decoder_u, true)?;
            if act.decoder_u {
                self.apply(NetId::E, &[(Which::Main, &adv), (Which::EncoderSeg, &seg)], lrs);
            } else {
                self.apply(NetId::E, &[(Which::EncoderSeg, &seg)], lrs);
            }
        }

        // features of the updated encoder, fixed for the rest of the step
        let f_st = self.no_grad(NetId::E, &seg_input)?;
        let f_t = if act.decoder_u || act.discriminator_p { Some(self.no_grad(NetId::E, &b.x_t)?) } else { None };

        // C: segmentation, optionally plus the prediction-space generator term
        {
            let (logits, tape_c) = self.forward(NetId::C, &f_st, Mode::Train)?;
            let (_, g) = seg_loss_grad(&to_f64(&logits), &b.y_s, logits.n, logits.c, w.alpha)?;
            let c = self.net(NetId::C);
            let mut grads = c.zero_grads();
            c.backward(&tape_c, from_f64(&logits, &g, w.lambda_seg), Some(&mut grads), false);
            if self.state.config.route_adv_p_to_classifier && act.discriminator_p {
                let f_t = f_t.as_ref().expect("target features");
                let (logits_t, tape_ct) = self.forward(NetId::C, f_t, Mode::Train)?;
                let dl = self.adv_p_generator_grad(&logits_t, w.lambda_adv_p)?;
                self.net(NetId::C).backward(&tape_ct, dl, Some(&mut grads), false);
            }
            self.apply(NetId::C, &[(Which::Main, &grads)], lrs);
        }

        // U: source adversarial generator term plus both cycles
        if act.decoder_u {
            let f_t = f_t.as_ref().expect("target features");
            let (x_ts, tape_ut) = self.forward(NetId::U, f_t, Mode::Train)?;
            let mut dx_ts = self.ds_generator_grad(&x_ts, w.lambda_adv_s, 0.0)?;
            let (rec_t, tape_g) = self.forward(NetId::Gt, &x_ts, Mode::Train)?;
            let (_, g_rec) = l1_mean(&to_f64(&b.x_t), &to_f64(&rec_t))?;
            dx_ts.add_assign(&self.net(NetId::Gt).backward(&tape_g, from_f64(&rec_t, &g_rec, w.lambda_cyc), None, true).expect("dx"));
            let (rec_s, tape_us) = self.forward(NetId::U, &f_st, Mode::Train)?;
            let (_, g_rec_s) = l1_mean(&to_f64(&b.x_s), &to_f64(&rec_s))?;
            let u = self.net(NetId::U);
            let mut grads = u.zero_grads();
            u.backward(&tape_ut, dx_ts, Some(&mut grads), false);
            u.backward(&tape_us, from_f64(&rec_s, &g_rec_s, w.lambda_cyc), Some(&mut grads), false);
            self.apply(NetId::U, &[(Which::Main, &grads)], lrs);
        }

        // D_s: real source vs translated target, plus the auxiliary head
        if act.discriminator_s {
            let f_t = f_t.as_ref().expect("target features");
            let x_ts = self.no_grad(NetId::U, f_t)?;
            let (real, tape_r) = self.forward(NetId::Ds, &b.x_s, Mode::Train)?;
            let (fake, tape_f) = self.forward(NetId::Ds, &x_ts, Mode::Train)?;
            let (loss, gr, gf) = self.d_disc(&channel(&real, 0), &channel(&fake, 0))?;
            self.parts.adv_s = finite("adv_s", loss)?;
            let mut d_real = real.zeros_like();
            let mut d_fake = fake.zeros_like();
            add_channel(&mut d_real, 0, &gr, 1.0);
            add_channel(&mut d_fake, 0, &gf, 1.0);
            let mut aux = None;
            if act.aux_head {
                let x_sts = self.no_grad(NetId::U, &f_st)?;
                let (real_aux, tape_ra) = self.forward(NetId::Ds, &x_sts, Mode::Train)?;
                let (loss, gr, gf) = self.d_disc(&channel(&real_aux, 1), &channel(&fake, 1))?;
                self.parts.adv_s_tilde = finite("adv_s_tilde", loss)?;
                add_channel(&mut d_fake, 1, &gf, w.lambda_adv_s_tilde);
                let mut d_ra = real_aux.zeros_like();
                add_channel(&mut d_ra, 1, &gr, w.lambda_adv_s_tilde);
                aux = Some((tape_ra, d_ra));
            }
            let d = self.net(NetId::Ds);
            let mut grads = d.zero_grads();
            d.backward(&tape_r, d_real, Some(&mut grads), false);
            d.backward(&tape_f, d_fake, Some(&mut grads), false);
            if let Some((tape, g)) = aux {
                d.backward(&tape, g, Some(&mut grads), false);
            }
            self.apply(NetId::Ds, &[(Which::Main, &grads)], lrs);
        }

        // D_p: predictions on translated source vs target
        if act.discriminator_p {
            let f_t = f_t.as_ref().expect("target features");
            let p_st = softmax_channels(&self.no_grad(NetId::C, &f_st)?);
            let p_t = softmax_channels(&self.no_grad(NetId::C, f_t)?);
            let (real, tape_r) = self.forward(NetId::Dp, &p_st, Mode::Train)?;
            let (fake, tape_f) = self.forward(NetId::Dp, &p_t, Mode::Train)?;
            let (loss, gr, gf) = self.d_disc(&to_f64(&real), &to_f64(&fake))?;
            self.parts.adv_p = finite("adv_p", loss)?;
            let d = self.net(NetId::Dp);
            let mut grads = d.zero_grads();
            d.backward(&tape_r, from_f64(&real, &gr, 1.0), Some(&mut grads), false);
            d.backward(&tape_f, from_f64(&fake, &gf, 1.0), Some(&mut grads), false);
            self.apply(NetId::Dp, &[(Which::Main, &grads)], lrs);
        }
        Ok(())
    }

    /// G_t's objective (adversarial generator term plus both weighted
    /// cycles) and its parameter gradient.
    fn generator_t_grads(&mut self) -> Result<(f64, Grads)> {
        let w = self.state.effective;
        let b = self.batch;
        let (x_st, tape_g1) = self.forward(NetId::Gt, &b.x_s, Mode::Train)?;
        let (d_fake, tape_dt) = self.forward(NetId::Dt, &x_st, Mode::Train)?;
        let (adv, g) = self.d_gen(&to_f64(&d_fake))?;
        let mut dx_st = self.net(NetId::Dt).backward(&tape_dt, from_f64(&d_fake, &g, 1.0), None, true);
        let (f_st, tape_e) = self.forward(NetId::E, &x_st, Mode::Train)?;
        let (rec_s, tape_u) = self.forward(NetId::U, &f_st, Mode::Train)?;
        let (cyc_s, g_rec) = l1_mean(&to_f64(&b.x_s), &to_f64(&rec_s))?;
        let df = self.net(NetId::U).backward(&tape_u, from_f64(&rec_s, &g_rec, w.lambda_cyc), None, true).expect("dx");
        add(&mut dx_st, self.net(NetId::E).backward(&tape_e, df, None, true).expect("dx"));
        let x_ts = self.no_grad(NetId::U, &self.no_grad(NetId::E, &b.x_t)?)?;
        let (rec_t, tape_g2) = self.forward(NetId::Gt, &x_ts, Mode::Train)?;
        let (cyc_t, g_rec) = l1_mean(&to_f64(&b.x_t), &to_f64(&rec_t))?;
        let g_net = self.net(NetId::Gt);
        let mut grads = g_net.zero_grads();
        g_net.backward(&tape_g2, from_f64(&rec_t, &g_rec, w.lambda_cyc), Some(&mut grads), false);
        g_net.backward(&tape_g1, dx_st.expect("dx"), Some(&mut grads), false);
        Ok((adv + w.lambda_cyc * (cyc_s + cyc_t), grads))
    }

    /// Gradient w.r.t. target logits of the prediction-space generator term.
    fn adv_p_generator_grad(&mut self, logits_t: &Tensor, weight: f64) -> Result<Tensor> {
        let p_t = softmax_channels(logits_t);
        let (score, tape) = self.forward(NetId::Dp, &p_t, Mode::Train)?;
        let (loss, g) = self.d_gen(&to_f64(&score))?;
        finite("adv_p", loss)?;
        let dp = self.net(NetId::Dp).backward(&tape, from_f64(&score, &g, weight), None, true).expect("dx");
        Ok(softmax_channels_backward(&p_t, &dp))
    }

    /// Input gradient of the D_s generator terms on translated target
    /// images: `main` weights the main head, `aux` the auxiliary head.
    fn ds_generator_grad(&mut self, x_ts: &Tensor, main: f64, aux: f64) -> Result<Tensor> {
        let (score, tape) = self.forward(NetId::Ds, x_ts, Mode::Train)?;
        let mut d = score.zeros_like();
        let (loss, g) = self.d_gen(&channel(&score, 0))?;
        finite("adv_s", loss)?;
        add_channel(&mut d, 0, &g, main);
        if aux != 0.0 {
            let (loss, g) = self.d_gen(&channel(&score, 1))?;
            finite("adv_s_tilde", loss)?;
            add_channel(&mut d, 1, &g, aux);
        }
        Ok(self.net(NetId::Ds).backward(&tape, d, None, true).expect("dx"))
    }

    /// Encoder gradients for its adversarial/cycle group and its
    /// segmentation group, each computed on fresh forwards.
    fn encoder_grads(&mut self, seg_input: &Tensor, with_adv: bool, with_seg: bool) -> Result<(Grads, Grads)> {
        let w = self.state.effective;
        let act = self.state.active;
        let b = self.batch;
        let mut adv = self.net(NetId::E).zero_grads();
        let mut seg = self.net(NetId::E).zero_grads();
        let (f_st, tape_st) = self.forward(NetId::E, seg_input, Mode::TrainUpdateStats)?;
        let mut df_st_adv: Option<Tensor> = None;
        if with_seg {
            let (logits, tape_c) = self.forward(NetId::C, &f_st, Mode::Train)?;
            let (loss, g) = seg_loss_grad(&to_f64(&logits), &b.y_s, logits.n, logits.c, w.alpha)?;
            self.parts.seg = finite("seg", loss.total)?;
            let df = self.net(NetId::C).backward(&tape_c, from_f64(&logits, &g, w.lambda_seg), None, true).expect("dx");
            self.net(NetId::E).backward(&tape_st, df, Some(&mut seg), false);
        }
        if with_adv {
            let (f_t, tape_t) = self.forward(NetId::E, &b.x_t, Mode::TrainUpdateStats)?;
            let mut df_t: Option<Tensor> = None;
            if act.discriminator_p && w.lambda_adv_p != 0.0 {
                let (logits_t, tape_ct) = self.forward(NetId::C, &f_t, Mode::Train)?;
                let dl = self.adv_p_generator_grad(&logits_t, w.lambda_adv_p)?;
                add(&mut df_t, self.net(NetId::C).backward(&tape_ct, dl, None, true).expect("dx"));
            }
            // translated target through U, judged by D_s and cycled through G_t
            let (x_ts, tape_ut) = self.forward(NetId::U, &f_t, Mode::Train)?;
            let aux = if act.aux_head { w.lambda_adv_s_tilde } else { 0.0 };
            let mut dx_ts = self.ds_generator_grad(&x_ts, w.lambda_adv_s, aux)?;
            let (rec_t, tape_g) = self.forward(NetId::Gt, &x_ts, Mode::Train)?;
            let (cyc_t, g_rec) = l1_mean(&to_f64(&b.x_t), &to_f64(&rec_t))?;
            dx_ts.add_assign(&self.net(NetId::Gt).backward(&tape_g, from_f64(&rec_t, &g_rec, w.lambda_cyc), None, true).expect("dx"));
            add(&mut df_t, self.net(NetId::U).backward(&tape_ut, dx_ts, None, true).expect("dx"));
            // source cycle
            let (rec_s, tape_us) = self.forward(NetId::U, &f_st, Mode::Train)?;
            let (cyc_s, g_rec_s) = l1_mean(&to_f64(&b.x_s), &to_f64(&rec_s))?;
            self.parts.cyc = finite("cyc", cyc_s + cyc_t)?;
            add(&mut df_st_adv, self.net(NetId::U).backward(&tape_us, from_f64(&rec_s, &g_rec_s, w.lambda_cyc), None, true).expect("dx"));
            let e = self.net(NetId::E);
            e.backward(&tape_t, df_t.expect("U path always contributes"), Some(&mut adv), false);
            e.backward(&tape_st, df_st_adv.expect("source cycle"), Some(&mut adv), false);
        }
        Ok((adv, seg))
    }
}

#[derive(Debug, Clone, Copy)]
enum Which {
    Main,
    EncoderSeg,
}

#[cfg(test)]
mod tests {
    use super::*;
    use sifa_core::data::{generate_synthetic, SyntheticSceneSpec};

    fn small_state() -> (TrainState, Batch) {
        let (src, tgt) = generate_synthetic(&SyntheticSceneSpec::new(32, 32, 3), 4).unwrap();
        let data = TrainData::new(&src.samples, &tgt.samples).unwrap();
        let config = TrainConfig { batch_size: 2, augment: false, ..Default::default() };
        let batch = make_batch(&data, &config, 0);
        (TrainState::new(config).unwrap(), batch)
    }

    fn with_run<R>(state: &mut TrainState, batch: &Batch, f: impl FnOnce(&mut StepRun) -> R) -> R {
        let mut obs = |_: &UpdateEvent, _: &Nets| {};
        let mut run = StepRun { state, batch, events: Vec::new(), parts: LossComponents::default(), observer: &mut obs };
        f(&mut run)
    }

    #[test]
    fn generator_gradient_matches_directional_derivative() {
        // The cycle path runs through E's train-mode batch norm, which is
        // strongly curved: central differences only settle below a 1e-6
        // step, just above f32 noise, hence the loose tolerance.
        for cyc in [0.0, 10.0] {
            let (mut st, batch) = small_state();
            st.effective.lambda_cyc = cyc;
            let (_, grads) = with_run(&mut st, &batch, |r| r.generator_t_grads().unwrap());
            let norm: f64 = grads.0.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
            assert!(norm > 0.0);
            let eps = 1e-6;
            let at = |sign: f64| {
                let mut s = st.clone();
                for (p, g) in s.nets.get_mut(NetId::Gt).params.iter_mut().zip(&grads.0) {
                    for (v, &gv) in p.data.iter_mut().zip(g) {
                        *v += (sign * eps * gv as f64 / norm) as f32;
                    }
                }
                with_run(&mut s, &batch, |r| r.generator_t_grads().unwrap().0)
            };
            // along the normalized gradient the directional derivative is the gradient norm
            let numeric = (at(1.0) - at(-1.0)) / (2.0 * eps);
            assert!((numeric - norm).abs() < 0.05 * norm, "cyc {cyc}: numeric {numeric} vs analytic {norm}");
        }
    }
}
