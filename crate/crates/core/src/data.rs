//! Synthetic two-domain cardiac phantoms, augmentation and scene-level
//! splitting.
//!
//! Every scene is a label geometry with four structures: a ventricle cavity
//! (LVC) wrapped by a myocardium ring (MYO), an atrium (LAC) and an aorta
//! (AA), all inside an elliptical body. The geometry is rendered twice, once
//! per domain appearance, so the two domains differ only in how intensities
//! look.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::Split;
use crate::{DomainTag, Error, Image, LabelMask, Result, Sample, DEFAULT_CLASSES};

pub const LABEL_AA: u8 = 1;
pub const LABEL_LAC: u8 = 2;
pub const LABEL_LVC: u8 = 3;
pub const LABEL_MYO: u8 = 4;

const MAX_ATTEMPTS: usize = 100;

/// Deterministic, independent RNG stream for `(seed, index, purpose)`.
pub fn stream_rng(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [index, purpose] {
        z = z.wrapping_add(v.wrapping_mul(0xBF58_476D_1CE4_E5B9)).rotate_left(29) ^ 0x94D0_49BB_1331_11EB;
        z ^= z >> 31;
        z = z.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    }
    ChaCha8Rng::seed_from_u64(z)
}

/// Intensity model of one domain. Intensities are given for the region
/// outside the body, body tissue, then AA, LAC, LVC, MYO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub intensities: [f32; 6],
    /// Per-scene uniform jitter applied to every region intensity.
    pub jitter: f32,
    /// Map `v -> 1 - v` before the gamma curve.
    pub invert: bool,
    /// Per-scene gamma drawn uniformly from this range.
    pub gamma: (f32, f32),
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_amplitude: f32,
    pub noise_std: f32,
}

impl Appearance {
    /// Bright blood pools over darker muscle and tissue.
    pub fn source_default() -> Self {
        Self {
            intensities: [0.0, 0.35, 0.85, 0.75, 0.9, 0.5],
            jitter: 0.04,
            invert: false,
            gamma: (1.0, 1.0),
            bias_amplitude: 0.1,
            noise_std: 0.03,
        }
    }

    /// The source table inverted, gamma-warped, biased and noisier.
    pub fn target_default() -> Self {
        Self {
            invert: true,
            gamma: (0.7, 1.4),
            bias_amplitude: 0.2,
            noise_std: 0.05,
            ..Self::source_default()
        }
    }

    /// Plain table lookup: no jitter, inversion, gamma, bias or noise.
    pub fn identity(intensities: [f32; 6]) -> Self {
        Self { intensities, jitter: 0.0, invert: false, gamma: (1.0, 1.0), bias_amplitude: 0.0, noise_std: 0.0 }
    }

    fn validate(&self, field: &'static str) -> Result<()> {
        let (g0, g1) = self.gamma;
        if !(g0 > 0.0 && g1 >= g0) || self.jitter < 0.0 || self.bias_amplitude < 0.0 || self.noise_std < 0.0 {
            return Err(Error::config(field, "gamma range must be positive and ordered; jitter, bias and noise nonnegative"));
        }
        if self.bias_amplitude >= 1.0 {
            return Err(Error::config(field, "bias amplitude must stay below 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub source: Appearance,
    pub target: Appearance,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        Self { height, width, source: Appearance::source_default(), target: Appearance::target_default(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::config("canvas", format!("{}x{} must be a positive multiple of 8", self.height, self.width)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::config("canvas", "scenes need at least 32x32 pixels"));
        }
        self.source.validate("source_appearance")?;
        self.target.validate("target_appearance")
    }
}

/// Ellipse in pixel coordinates (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = libm::sincos(self.theta);
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }

    fn grown(&self, by: f64) -> Self {
        Self { a: self.a + by, b: self.b + by, ..*self }
    }

    /// Distance from the center to the boundary along direction `phi`.
    fn radius_towards(&self, phi: f64) -> f64 {
        let t = phi - self.theta;
        let (s, c) = libm::sincos(t);
        1.0 / libm::sqrt((c / self.a) * (c / self.a) + (s / self.b) * (s / self.b))
    }
}

/// Label geometry shared by both renderings of a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneGeometry {
    pub body: Ellipse,
    pub lvc: Ellipse,
    /// Outer boundary of the myocardium ring; its inner boundary is `lvc`.
    pub myo_outer: Ellipse,
    pub lac: Ellipse,
    pub aa: Ellipse,
}

impl SceneGeometry {
    /// Analytic area of each foreground class, indexed by label.
    pub fn class_areas(&self) -> [f64; DEFAULT_CLASSES] {
        let mut areas = [0.0; DEFAULT_CLASSES];
        areas[LABEL_AA as usize] = self.aa.area();
        areas[LABEL_LAC as usize] = self.lac.area();
        areas[LABEL_LVC as usize] = self.lvc.area();
        areas[LABEL_MYO as usize] = self.myo_outer.area() - self.lvc.area();
        areas
    }

    /// Region index per pixel: 0 outside body, 1 body tissue, 2.. structures
    /// (label + 1).
    fn regions(&self, height: usize, width: usize) -> Vec<u8> {
        let mut out = vec![0u8; height * width];
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let region = if self.lvc.contains(px, py) {
                    LABEL_LVC + 1
                } else if self.myo_outer.contains(px, py) {
                    LABEL_MYO + 1
                } else if self.lac.contains(px, py) {
                    LABEL_LAC + 1
                } else if self.aa.contains(px, py) {
                    LABEL_AA + 1
                } else if self.body.contains(px, py) {
                    1
                } else {
                    0
                };
                out[y * width + x] = region;
            }
        }
        out
    }

    pub fn rasterize(&self, height: usize, width: usize) -> LabelMask {
        let labels = self.regions(height, width).into_iter().map(|r| r.saturating_sub(1)).collect();
        LabelMask::new(height, width, DEFAULT_CLASSES, labels).expect("labels below class count")
    }

    /// True when every structure is visible, the structures do not touch
    /// each other and all of them stay inside the body.
    fn is_valid(&self, height: usize, width: usize) -> bool {
        let shapes = [self.myo_outer, self.lac, self.aa];
        let mut owner = vec![u8::MAX; height * width];
        let mut counts = [0usize; 3];
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                for (i, s) in shapes.iter().enumerate() {
                    if s.contains(px, py) {
                        if owner[y * width + x] != u8::MAX || !self.body.contains(px, py) {
                            return false;
                        }
                        owner[y * width + x] = i as u8;
                        counts[i] += 1;
                    }
                }
            }
        }
        let mask = self.rasterize(height, width);
        counts.iter().all(|&c| c > 0) && (1..DEFAULT_CLASSES as u8).all(|k| mask.count(k) > 0)
    }
}

fn draw_geometry(rng: &mut ChaCha8Rng, height: usize, width: usize) -> SceneGeometry {
    let s = height.min(width) as f64;
    let (h, w) = (height as f64, width as f64);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    let body = Ellipse {
        cx: w / 2.0 + u(-0.03, 0.03) * s,
        cy: h / 2.0 + u(-0.03, 0.03) * s,
        a: u(0.44, 0.48) * w,
        b: u(0.40, 0.46) * h,
        theta: u(-0.15, 0.15),
    };
    let lvc = Ellipse {
        cx: body.cx + u(-0.06, 0.06) * s,
        cy: body.cy + u(-0.06, 0.06) * s,
        a: u(0.12, 0.16) * s,
        b: u(0.09, 0.13) * s,
        theta: u(0.0, PI),
    };
    let myo_outer = lvc.grown(u(0.06, 0.08) * s);
    let gap = 0.025 * s;
    let place = |phi: f64, a: f64, b: f64, theta: f64| {
        let probe = Ellipse { cx: 0.0, cy: 0.0, a, b, theta };
        let dist = myo_outer.radius_towards(phi) + probe.radius_towards(phi + PI) + gap;
        let (sp, cp) = libm::sincos(phi);
        Ellipse { cx: myo_outer.cx + dist * cp, cy: myo_outer.cy + dist * sp, a, b, theta }
    };
    let phi_lac = u(0.0, 2.0 * PI);
    let lac = place(phi_lac, u(0.09, 0.12) * s, u(0.07, 0.10) * s, u(0.0, PI));
    let r_aa = u(0.07, 0.09) * s;
    let phi_aa = phi_lac + u(0.45, 0.75) * PI * if u(0.0, 1.0) < 0.5 { 1.0 } else { -1.0 };
    let aa = place(phi_aa, r_aa, r_aa, 0.0);
    SceneGeometry { body, lvc, myo_outer, lac, aa }
}

/// Draws the geometry of scene `index`, retrying perturbed draws until it is
/// non-degenerate.
pub fn scene_geometry(spec: &SyntheticSceneSpec, index: u64) -> Result<SceneGeometry> {
    let mut rng = stream_rng(spec.seed, index, 0);
    for _ in 0..MAX_ATTEMPTS {
        let g = draw_geometry(&mut rng, spec.height, spec.width);
        if g.is_valid(spec.height, spec.width) {
            return Ok(g);
        }
    }
    Err(Error::DegenerateGeometry { attempts: MAX_ATTEMPTS })
}

/// Smooth field in `[-1, 1]` built from a few random low-frequency cosines.
fn bias_field(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f32> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.3..1.0) * PI / height.max(width) as f64;
            let dir = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (freq * libm::cos(dir), freq * libm::sin(dir), phase)
        })
        .collect();
    let mut out = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            let v: f64 = waves.iter().map(|&(fx, fy, ph)| libm::cos(fx * x as f64 + fy * y as f64 + ph)).sum();
            out[y * width + x] = (v / 3.0) as f32;
        }
    }
    out
}

fn render(geometry: &SceneGeometry, app: &Appearance, height: usize, width: usize, rng: &mut ChaCha8Rng, domain: DomainTag) -> Image {
    let mut table = app.intensities;
    if app.jitter > 0.0 {
        for v in &mut table {
            *v += rng.random_range(-app.jitter..=app.jitter);
        }
    }
    let gamma = if app.gamma.1 > app.gamma.0 { rng.random_range(app.gamma.0..=app.gamma.1) } else { app.gamma.0 };
    let bias = (app.bias_amplitude > 0.0).then(|| bias_field(rng, height, width));
    let noise = Normal::new(0.0f32, app.noise_std.max(f32::MIN_POSITIVE)).expect("valid std");
    let regions = geometry.regions(height, width);
    let data = regions
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut v = table[r as usize].clamp(0.0, 1.0);
            if app.invert {
                v = 1.0 - v;
            }
            if gamma != 1.0 {
                v = libm::powf(v, gamma);
            }
            if let Some(b) = &bias {
                v *= 1.0 + app.bias_amplitude * b[i];
            }
            if app.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            v
        })
        .collect();
    Image::new(height, width, data, domain).expect("canvas matches payload")
}

/// Renders scene `index` in one domain. Source renderings carry the mask;
/// target renderings carry it too so callers can keep it for evaluation.
pub fn render_scene(spec: &SyntheticSceneSpec, index: u64, domain: DomainTag) -> Result<Sample> {
    let geometry = scene_geometry(spec, index)?;
    let (app, purpose) = match domain {
        DomainTag::Source => (&spec.source, 1),
        DomainTag::Target => (&spec.target, 2),
        other => return Err(Error::invalid(format!("cannot render a `{other}` scene"))),
    };
    let mut rng = stream_rng(spec.seed, index, purpose);
    let image = render(&geometry, app, spec.height, spec.width, &mut rng, domain);
    Sample::new(image, Some(geometry.rasterize(spec.height, spec.width)))
}

/// Ordered samples of one domain; `scenes[i]` is the scene id of sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: DomainTag,
    pub split: Split,
    pub samples: Vec<Sample>,
    pub scenes: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn without_masks(&self) -> Self {
        Self { samples: self.samples.iter().map(Sample::without_mask).collect(), ..self.clone() }
    }
}

/// Renders `n_scenes` geometries in both domains.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, n_scenes: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if n_scenes == 0 {
        return Err(Error::config("scenes", "need at least one scene"));
    }
    let mut source = Vec::with_capacity(n_scenes);
    let mut target = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        source.push(render_scene(spec, i as u64, DomainTag::Source)?);
        target.push(render_scene(spec, i as u64, DomainTag::Target)?);
    }
    let scenes: Vec<usize> = (0..n_scenes).collect();
    Ok((
        Dataset { domain: DomainTag::Source, split: Split::Train, samples: source, scenes: scenes.clone() },
        Dataset { domain: DomainTag::Target, split: Split::Train, samples: target, scenes },
    ))
}

/// Number of scenes on the training side: `ceil(n * ratio)`, kept within
/// `1..n`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let k = libm::ceil(n as f64 * ratio - 1e-9) as usize;
    k.clamp(1, n - 1)
}

/// Seeded partition of scene ids into training and test scenes.
pub fn split_scenes(scene_ids: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("ratio", "must lie strictly between 0 and 1"));
    }
    let mut ids = scene_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid("need at least two scenes to split"));
    }
    let mut rng = stream_rng(seed, 0, 7);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let k = train_count(ids.len(), ratio);
    let mut train = ids[..k].to_vec();
    let mut test = ids[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Partitions a dataset by scene so that no geometry appears on both sides.
pub fn split_dataset(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_ids, _) = split_scenes(&ds.scenes, ratio, seed)?;
    let mut train = Dataset { split: Split::Train, samples: Vec::new(), scenes: Vec::new(), ..ds.clone() };
    let mut test = Dataset { split: Split::Test, samples: Vec::new(), scenes: Vec::new(), ..ds.clone() };
    for (sample, &scene) in ds.samples.iter().zip(&ds.scenes) {
        let side = if train_ids.binary_search(&scene).is_ok() { &mut train } else { &mut test };
        side.samples.push(sample.clone());
        side.scenes.push(scene);
    }
    Ok((train, test))
}

/// Parameters of one spatial augmentation, applied about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { rotation_deg: 0.0, scale: 1.0, shear_deg: 0.0 };

    /// Rotation within ±15°, scale within [0.9, 1.1], shear within ±5°.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            rotation_deg: rng.random_range(-15.0..=15.0),
            scale: rng.random_range(0.9..=1.1),
            shear_deg: rng.random_range(-5.0..=5.0),
        }
    }

    /// Forward matrix `rotation * shear * scale` acting on (x, y).
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = libm::sincos(self.rotation_deg.to_radians());
        let k = libm::tan(self.shear_deg.to_radians());
        let m = self.scale;
        // [c -s; s c] * [1 k; 0 1] * m
        [[c * m, (c * k - s) * m], [s * m, (s * k + c) * m]]
    }
}

/// Applies the same spatial transform to image (bilinear) and mask (nearest
/// neighbour). Pixels mapped from outside the canvas take the image minimum
/// and label 0.
pub fn augment_with(sample: &Sample, params: &AffineParams) -> Sample {
    if *params == AffineParams::IDENTITY {
        return sample.clone();
    }
    let img = &sample.image;
    let (h, w) = (img.height(), img.width());
    let m = params.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let fill = img.data().iter().copied().fold(f32::INFINITY, f32::min);
    let src = img.data();
    let at = |x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            fill
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0f32; h * w];
    let mut labels = sample.mask.as_ref().map(|_| vec![0u8; h * w]);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            let (x0, y0) = (libm::floor(sx), libm::floor(sy));
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (xi, yi) = (x0 as isize, y0 as isize);
            out[y * w + x] = (1.0 - fy) * ((1.0 - fx) * at(xi, yi) + fx * at(xi + 1, yi))
                + fy * ((1.0 - fx) * at(xi, yi + 1) + fx * at(xi + 1, yi + 1));
            if let (Some(lab), Some(mask)) = (labels.as_mut(), sample.mask.as_ref()) {
                let (nx, ny) = (libm::round(sx), libm::round(sy));
                if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                    lab[y * w + x] = mask.get(ny as usize, nx as usize);
                }
            }
        }
    }
    let image = Image::new(h, w, out, img.domain()).expect("same canvas");
    let mask = labels.map(|l| LabelMask::new(h, w, sample.mask.as_ref().unwrap().classes(), l).expect("labels copied"));
    Sample { image, mask }
}

/// Draws augmentation parameters and applies them.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let params = AffineParams::draw(rng);
    augment_with(sample, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(size: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec::new(size, size, 11)
    }

    #[test]
    fn deterministic_generation() {
        let a = generate_synthetic(&spec(64), 3).unwrap();
        let b = generate_synthetic(&spec(64), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_appearance_gives_identical_domains() {
        let table = [0.0, 0.3, 0.8, 0.7, 0.9, 0.5];
        let s = SyntheticSceneSpec {
            source: Appearance::identity(table),
            target: Appearance::identity(table),
            ..spec(64)
        };
        let (src, tgt) = generate_synthetic(&s, 4).unwrap();
        for (a, b) in src.samples.iter().zip(&tgt.samples) {
            assert_eq!(a.image.data(), b.image.data());
        }
    }

    #[test]
    fn geometry_is_shared_across_domains() {
        let (src, tgt) = generate_synthetic(&spec(64), 5).unwrap();
        for (a, b) in src.samples.iter().zip(&tgt.samples) {
            assert_eq!(a.mask, b.mask);
            assert_ne!(a.image.data(), b.image.data());
        }
    }

    #[test]
    fn every_class_present() {
        let (src, _) = generate_synthetic(&spec(64), 20).unwrap();
        for s in &src.samples {
            let m = s.mask.as_ref().unwrap();
            assert_eq!(m.label_set(), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn bad_canvas_rejected() {
        assert!(generate_synthetic(&SyntheticSceneSpec::new(60, 64, 1), 1).is_err());
        assert!(generate_synthetic(&spec(64), 0).is_err());
    }

    #[test]
    fn split_counts() {
        let ids: Vec<usize> = (0..20).collect();
        let (tr, te) = split_scenes(&ids, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (16, 4));
        let (tr, te) = split_scenes(&[0, 1], 0.5, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
        assert!(split_scenes(&[0], 0.5, 3).is_err());
        assert!(split_scenes(&ids, 1.0, 3).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let (src, _) = generate_synthetic(&spec(64), 1).unwrap();
        let s = &src.samples[0];
        assert_eq!(&augment_with(s, &AffineParams::IDENTITY), s);
    }

    #[test]
    fn quarter_turn_moves_single_pixel() {
        let (h, w) = (16usize, 16usize);
        let (r, c) = (3usize, 11usize);
        let mut labels = vec![0u8; h * w];
        labels[r * w + c] = 2;
        let image = Image::new(h, w, labels.iter().map(|&l| l as f32).collect(), DomainTag::Source).unwrap();
        let sample = Sample::new(image, Some(LabelMask::new(h, w, 5, labels).unwrap())).unwrap();
        let out = augment_with(&sample, &AffineParams { rotation_deg: 90.0, scale: 1.0, shear_deg: 0.0 });
        // forward map on (x, y): (x, y) -> center + (-(y - cy), x - cx)
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let nx = (cx - (r as f64 - cy)) as usize;
        let ny = (cy + (c as f64 - cx)) as usize;
        let m = out.mask.unwrap();
        assert_eq!(m.count(2), 1);
        assert_eq!(m.get(ny, nx), 2);
    }
}
